//! Coarse-to-fine multi-pass NMF.
//!
//! Each pass halves the hop size, recomputes every spectrogram on the new
//! grid and runs the partial IS-NMF. The first pass starts from random
//! activations; later passes start from the filtered and rescaled
//! activations of the previous pass, so regions zeroed by the filter stay
//! zero from then on. The noise dictionary and its activations are drawn
//! afresh every pass.

pub mod filter;

use ndarray::{Array2, ShapeBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::blocksparse::{ActivationBlock, BlockKind, BlockSparseActivations};
use crate::error::{Error, Result};
use crate::estimators::GridInfo;
use crate::nmf::{isnmf, DictionaryLayout, NmfConfig};
use crate::spectral::{frame_count, stft_power, SpectrogramParams, Window};

pub use filter::{
    gaussian_blur, interpass_filter, morph_open_lines, threshold_zero, FilterParams, LineKernel,
};

const INIT_LOW: f64 = 0.1;
const INIT_HIGH: f64 = 1.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultipassConfig {
    pub hlen_init: usize,
    pub hlen_target: usize,
    /// Window length as a multiple of the hop.
    pub overlap: usize,
    pub window: Window,
    pub noise_rank: usize,
    pub seed: u64,
    pub filter: FilterParams,
    pub nmf: NmfConfig,
}

impl Default for MultipassConfig {
    fn default() -> Self {
        Self {
            hlen_init: 32768,
            hlen_target: 1024,
            overlap: 8,
            window: Window::Hann,
            noise_rank: 8,
            seed: 0,
            filter: FilterParams::default(),
            nmf: NmfConfig::default(),
        }
    }
}

impl MultipassConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.hlen_init.is_power_of_two() || !self.hlen_target.is_power_of_two() {
            return Err(Error::InvalidParams(format!(
                "hop sizes must be powers of two (init {}, target {})",
                self.hlen_init, self.hlen_target
            )));
        }
        if self.hlen_init <= self.hlen_target {
            return Err(Error::InvalidParams(format!(
                "empty hop schedule: hlen_init {} must exceed hlen_target {}",
                self.hlen_init, self.hlen_target
            )));
        }
        if self.overlap < 2 {
            return Err(Error::InvalidParams(format!(
                "overlap must be at least 2, got {}",
                self.overlap
            )));
        }
        self.filter.validate()?;
        self.nmf.validate()
    }

    /// Hop sizes of the executed passes, coarsest first.
    pub fn hop_schedule(&self) -> Vec<usize> {
        let mut hops = Vec::new();
        let mut hlen = self.hlen_init;
        while hlen > self.hlen_target {
            hops.push(hlen);
            hlen /= 2;
        }
        hops
    }

    pub fn params_for(&self, hlen: usize) -> SpectrogramParams {
        SpectrogramParams {
            wlen: hlen * self.overlap,
            hlen,
            window: self.window,
        }
    }

    /// Analysis grid of the last executed pass.
    pub fn final_params(&self) -> Option<SpectrogramParams> {
        self.hop_schedule().last().map(|&h| self.params_for(h))
    }
}

/// Frame counts along both axes of the activation matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameGrid {
    /// Rows of every block in order (tracks, then noise).
    pub block_rows: Vec<usize>,
    pub mix_frames: usize,
}

impl FrameGrid {
    pub fn of(h: &BlockSparseActivations) -> Self {
        Self {
            block_rows: h.blocks().iter().map(|b| b.n_rows()).collect(),
            mix_frames: h.n_cols(),
        }
    }
}

/// Nearest-neighbour resampling of a block to `new_rows x new_cols`:
/// new `(t, tau)` takes old `(floor(t T_old / T_new), floor(tau K_old / K_new))`.
fn scale_block(
    b: &ActivationBlock,
    new_rows: usize,
    new_cols: usize,
    row_offset: usize,
) -> Result<ActivationBlock> {
    let (old_rows, old_cols) = (b.n_rows(), b.n_cols());
    if old_rows == 0 || old_cols == 0 || new_rows == 0 || new_cols == 0 {
        return Err(Error::InvalidInput(format!(
            "cannot rescale a {old_rows}x{old_cols} block to {new_rows}x{new_cols}"
        )));
    }
    // New rows mapping to old row r: [ceil(r Tn / To), ceil((r+1) Tn / To)).
    let first_new = |r: usize| (r * new_rows).div_ceil(old_rows);
    let mut columns = Vec::new();
    for tau in 0..new_cols {
        let src = tau * old_cols / new_cols;
        let (rows, vals) = b.column(src);
        let mut col = Vec::with_capacity(rows.len() * 2);
        for (&r, &v) in rows.iter().zip(vals) {
            let r = r as usize;
            for t in first_new(r)..first_new(r + 1).min(new_rows) {
                col.push((t as u32, v));
            }
        }
        columns.push(col);
    }
    Ok(ActivationBlock::from_columns(
        new_rows, row_offset, b.kind, columns,
    ))
}

/// Rescales every block onto a new frame grid.
pub fn scale_activations(
    h: &BlockSparseActivations,
    new_grid: &FrameGrid,
) -> Result<BlockSparseActivations> {
    if new_grid.block_rows.len() != h.blocks().len() {
        return Err(Error::InvalidInput(format!(
            "grid has {} blocks but activations have {}",
            new_grid.block_rows.len(),
            h.blocks().len()
        )));
    }
    let mut offset = 0;
    let mut blocks = Vec::with_capacity(h.blocks().len());
    for (b, &rows) in h.blocks().iter().zip(&new_grid.block_rows) {
        blocks.push(scale_block(b, rows, new_grid.mix_frames, offset)?);
        offset += rows;
    }
    BlockSparseActivations::new(blocks, new_grid.mix_frames)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDensity {
    pub kind: BlockKind,
    pub rows: usize,
    pub nnz: usize,
    pub density: f64,
}

/// Diagnostics of one executed pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassReport {
    pub hlen: usize,
    pub wlen: usize,
    pub mix_frames: usize,
    pub iterations: usize,
    pub converged: bool,
    pub initial_divergence: f64,
    pub final_divergence: f64,
    pub divergence_trace: Vec<f64>,
    pub blocks: Vec<BlockDensity>,
    pub density: f64,
}

#[derive(Debug, Clone)]
pub struct MultipassOutput {
    pub activations: BlockSparseActivations,
    /// Learned noise dictionary of the final pass (bins x noise rank).
    pub noise_dictionary: Array2<f64>,
    pub params: SpectrogramParams,
    pub sample_rate: u32,
    pub passes: Vec<PassReport>,
}

impl MultipassOutput {
    /// Frame grid of the final pass.
    pub fn grid(&self) -> GridInfo {
        GridInfo {
            hlen: self.params.hlen,
            wlen: self.params.wlen,
            sample_rate: self.sample_rate,
            n_frames: self.activations.n_cols(),
        }
    }
}

fn random_block(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    offset: usize,
    kind: BlockKind,
) -> ActivationBlock {
    ActivationBlock::full(rows, cols, offset, kind, |_, _| {
        rng.gen_range(INIT_LOW..INIT_HIGH)
    })
}

/// Runs the multi-pass decomposition of `mix` against the known `tracks`.
pub fn multipass_nmf(
    mix: &AudioBuffer,
    tracks: &[AudioBuffer],
    cfg: &MultipassConfig,
) -> Result<MultipassOutput> {
    cfg.validate()?;
    if tracks.is_empty() {
        return Err(Error::InvalidInput("at least one track is required".into()));
    }
    for (i, t) in tracks.iter().enumerate() {
        if t.sample_rate != mix.sample_rate {
            return Err(Error::InvalidInput(format!(
                "track {i} has sample rate {} Hz but the mix has {} Hz",
                t.sample_rate, mix.sample_rate
            )));
        }
    }
    let schedule = cfg.hop_schedule();
    let coarsest = cfg.params_for(schedule[0]);
    for (i, t) in tracks.iter().enumerate() {
        if t.len() < coarsest.wlen {
            return Err(Error::InvalidInput(format!(
                "track {i} has {} samples, shorter than the coarsest window of {}",
                t.len(),
                coarsest.wlen
            )));
        }
    }
    if mix.len() < coarsest.wlen {
        return Err(Error::InvalidInput(format!(
            "mix has {} samples, shorter than the coarsest window of {}",
            mix.len(),
            coarsest.wlen
        )));
    }

    let n_tracks = tracks.len();
    let rank = cfg.noise_rank;
    let mut passes = Vec::with_capacity(schedule.len());
    let mut h: Option<BlockSparseActivations> = None;
    let mut noise_dictionary = Array2::zeros((0, rank));
    let mut params = coarsest;

    for (pass, &hlen) in schedule.iter().enumerate() {
        params = cfg.params_for(hlen);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(pass as u64));

        let spectra = tracks
            .par_iter()
            .map(|t| stft_power(t, &params))
            .collect::<Result<Vec<_>>>()?;
        let y = stft_power(mix, &params)?;
        let (bins, k) = y.data.dim();
        let track_frames: Vec<usize> = spectra.iter().map(|s| s.n_frames()).collect();
        debug_assert!(track_frames
            .iter()
            .zip(tracks)
            .all(|(&n, t)| n == frame_count(t.len(), &params).unwrap()));

        let mut block_rows = track_frames.clone();
        if rank > 0 {
            block_rows.push(rank);
        }
        let grid = FrameGrid {
            block_rows,
            mix_frames: k,
        };

        let mut blocks: Vec<ActivationBlock> = match h.take() {
            None => {
                let mut offset = 0;
                let mut blocks = Vec::with_capacity(n_tracks + 1);
                for (i, &rows) in track_frames.iter().enumerate() {
                    blocks.push(random_block(&mut rng, rows, k, offset, BlockKind::Track(i)));
                    offset += rows;
                }
                blocks
            }
            Some(prev) => {
                let filtered = interpass_filter(&prev, &cfg.filter)?;
                scale_activations(&filtered, &grid)?
                    .into_blocks()
                    .into_iter()
                    .filter(|b| !b.is_noise())
                    .collect()
            }
        };
        let track_rows: usize = track_frames.iter().sum();
        if rank > 0 {
            blocks.push(random_block(
                &mut rng,
                rank,
                k,
                track_rows,
                BlockKind::Noise,
            ));
        }
        let mut activations = BlockSparseActivations::new(blocks, k)?;

        let mut x = Array2::zeros((bins, track_rows + rank).f());
        let mut col = 0;
        for s in &spectra {
            for frame in s.data.columns() {
                x.column_mut(col).assign(&frame);
                col += 1;
            }
        }
        for r in 0..rank {
            for v in x.column_mut(track_rows + r).iter_mut() {
                *v = rng.gen_range(INIT_LOW..INIT_HIGH);
            }
        }

        let layout = DictionaryLayout::of(&activations)?;
        let report = isnmf(y.data.view(), &mut x, &mut activations, &layout, &cfg.nmf)?;

        log::info!(
            "pass {}/{}: hop {hlen}, window {}, {k} frames, {} iterations, divergence {:.4e} -> {:.4e}, density {:.4}",
            pass + 1,
            schedule.len(),
            params.wlen,
            report.iterations(),
            report.initial_divergence,
            report.final_divergence(),
            activations.density()
        );
        passes.push(PassReport {
            hlen,
            wlen: params.wlen,
            mix_frames: k,
            iterations: report.iterations(),
            converged: report.converged,
            initial_divergence: report.initial_divergence,
            final_divergence: report.final_divergence(),
            blocks: activations
                .blocks()
                .iter()
                .map(|b| BlockDensity {
                    kind: b.kind,
                    rows: b.n_rows(),
                    nnz: b.nnz(),
                    density: b.density(),
                })
                .collect(),
            density: activations.density(),
            divergence_trace: report.divergence_trace,
        });
        noise_dictionary = x.slice(ndarray::s![.., track_rows..]).to_owned();
        h = Some(activations);
    }

    Ok(MultipassOutput {
        activations: h.expect("schedule is non-empty"),
        noise_dictionary,
        params,
        sample_rate: mix.sample_rate,
        passes,
    })
}
