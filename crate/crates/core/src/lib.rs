//! Recovers time-warp and gain curves of known tracks in a DJ mix by
//! multi-pass Itakura-Saito NMF over block-sparse activations.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod blocksparse;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod mixgen;
pub mod multipass;
pub mod nmf;
pub mod spectral;

pub use error::{Error, Result};
