//! Itakura-Saito NMF with partial multiplicative updates.
//!
//! The dictionary `X` concatenates the (frozen) track spectrograms followed by
//! a learned noise dictionary. Only the activations `H` and the noise columns
//! of `X` are updated:
//!
//! ```text
//! H    <- H    * [X^T ((XH)^-2 * Y)] / [X^T (XH)^-1]
//! Xbar <- Xbar * [((XH)^-2 * Y) Hbar^T] / [(XH)^-1 Hbar^T]
//! ```
//!
//! Updates are applied to the stored entries of `H` only.

use ndarray::{Array2, ArrayView2, ShapeBuilder, Zip};
use serde::{Deserialize, Serialize};

use crate::blocksparse::{masked_gram_pair, reconstruct, BlockKind, BlockSparseActivations};
use crate::error::{check_shape, Error, Result};

pub const DEFAULT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmfConfig {
    pub max_iters: usize,
    /// Stop once `(D_prev - D_cur) / D_prev` drops below this.
    pub rel_tol: f64,
    /// Floor applied to `XH` and to both divergence arguments.
    pub eps: f64,
}

impl Default for NmfConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            rel_tol: 1e-4,
            eps: DEFAULT_EPS,
        }
    }
}

impl NmfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return Err(Error::InvalidParams(format!(
                "rel_tol must lie in (0, 1), got {}",
                self.rel_tol
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidParams(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Column ranges of the dictionary, in block order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictionaryLayout {
    pub track_blocks: Vec<TrackSlot>,
    pub noise_width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackSlot {
    pub track_id: usize,
    pub offset: usize,
    pub width: usize,
}

impl DictionaryLayout {
    /// Packs tracks contiguously in the given order with the noise block last.
    pub fn new(track_widths: &[(usize, usize)], noise_width: usize) -> Result<Self> {
        let mut offset = 0;
        let mut track_blocks = Vec::with_capacity(track_widths.len());
        for &(track_id, width) in track_widths {
            if width == 0 {
                return Err(Error::InvalidInput(format!(
                    "track {track_id} has zero frames"
                )));
            }
            track_blocks.push(TrackSlot {
                track_id,
                offset,
                width,
            });
            offset += width;
        }
        Ok(Self {
            track_blocks,
            noise_width,
        })
    }

    /// Layout implied by the block structure of `h`.
    pub fn of(h: &BlockSparseActivations) -> Result<Self> {
        let mut tracks = Vec::new();
        let mut noise = 0;
        for (i, b) in h.blocks().iter().enumerate() {
            match b.kind {
                BlockKind::Track(id) => {
                    if noise > 0 {
                        return Err(Error::InvalidInput(
                            "noise block must come after every track block".into(),
                        ));
                    }
                    tracks.push((id, b.n_rows()));
                }
                BlockKind::Noise => {
                    if i + 1 != h.blocks().len() {
                        return Err(Error::InvalidInput("noise block must be last".into()));
                    }
                    noise = b.n_rows();
                }
            }
        }
        Self::new(&tracks, noise)
    }

    pub fn noise_offset(&self) -> usize {
        self.track_blocks.last().map_or(0, |b| b.offset + b.width)
    }

    pub fn total_columns(&self) -> usize {
        self.noise_offset() + self.noise_width
    }
}

#[inline]
fn d_is(x: f64, y: f64, eps: f64) -> f64 {
    let r = x.max(eps) / y.max(eps);
    r - r.ln() - 1.0
}

/// `sum d_IS(Y | V)` with `d_IS(x|y) = x/y - ln(x/y) - 1`, both arguments
/// floored at `eps`.
pub fn is_divergence(y: ArrayView2<f64>, v: ArrayView2<f64>, eps: f64) -> Result<f64> {
    check_shape("is_divergence", y.dim(), v.dim())?;
    let mut total = 0.0;
    Zip::from(&y)
        .and(&v)
        .for_each(|&a, &b| total += d_is(a, b, eps));
    Ok(total)
}

/// `(Y * V^-2, V^-1)` with `V` floored at `eps`, column-major.
fn update_operands(y: &ArrayView2<f64>, v: &Array2<f64>, eps: f64) -> (Array2<f64>, Array2<f64>) {
    let mut ratio = Array2::zeros(v.raw_dim().f());
    let mut inv = Array2::zeros(v.raw_dim().f());
    Zip::from(&mut ratio)
        .and(&mut inv)
        .and(y)
        .and(v)
        .for_each(|r, i, &yv, &vv| {
            let iv = 1.0 / vv.max(eps);
            *i = iv;
            *r = yv * iv * iv;
        });
    (ratio, inv)
}

fn check_problem(
    y: &ArrayView2<f64>,
    x: &ArrayView2<f64>,
    h: &BlockSparseActivations,
) -> Result<()> {
    check_shape("dictionary rows", (y.nrows(), h.n_rows()), x.dim())?;
    check_shape("target", (x.nrows(), h.n_cols()), y.dim())
}

fn apply_h_update(
    y: &ArrayView2<f64>,
    x: &ArrayView2<f64>,
    v: &Array2<f64>,
    h: &mut BlockSparseActivations,
    eps: f64,
) -> Result<()> {
    let (ratio, inv) = update_operands(y, v, eps);
    let (num, den) = masked_gram_pair(ratio.view(), inv.view(), x.view(), h)?;
    for ((block, n), d) in h
        .blocks_mut()
        .iter_mut()
        .zip(&num.per_block)
        .zip(&den.per_block)
    {
        for ((val, &n), &d) in block.values_mut().iter_mut().zip(n).zip(d) {
            *val *= n / d.max(eps);
        }
        block.drop_zeros();
    }
    Ok(())
}

/// One multiplicative update of every stored activation.
pub fn update_h(
    y: ArrayView2<f64>,
    x: ArrayView2<f64>,
    h: &mut BlockSparseActivations,
    eps: f64,
) -> Result<()> {
    check_problem(&y, &x, h)?;
    let v = reconstruct(x.view(), h)?;
    apply_h_update(&y, &x, &v, h, eps)
}

/// Updates the noise columns of `x` in place; `v` must hold `XH` on entry and
/// is brought up to date on return.
fn apply_xbar_update(
    y: &ArrayView2<f64>,
    x: &mut Array2<f64>,
    h: &BlockSparseActivations,
    layout: &DictionaryLayout,
    v: &mut Array2<f64>,
    eps: f64,
) {
    let Some(noise) = h.noise_block() else { return };
    let r_count = layout.noise_width;
    if r_count == 0 {
        return;
    }
    let off = layout.noise_offset();
    let hbar = noise.to_dense();
    let (ratio, inv) = update_operands(y, v, eps);
    // (M x K) . (K x R)
    let num = ratio.dot(&hbar.t());
    let den = inv.dot(&hbar.t());
    let mut delta = Array2::<f64>::zeros((x.nrows(), r_count).f());
    for r in 0..r_count {
        let mut col = x.column_mut(off + r);
        for m in 0..col.len() {
            let old = col[m];
            let new = old * num[[m, r]] / den[[m, r]].max(eps);
            col[m] = new;
            delta[[m, r]] = new - old;
        }
    }
    // V += (Xbar_new - Xbar_old) Hbar
    ndarray::linalg::general_mat_mul(1.0, &delta, &hbar, 1.0, v);
    v.mapv_inplace(|e| e.max(0.0));
}

/// One multiplicative update of the noise dictionary columns.
///
/// Track columns are left bit-identical. With `noise_width == 0` this is a
/// no-op.
pub fn update_xbar(
    y: ArrayView2<f64>,
    x: &mut Array2<f64>,
    h: &BlockSparseActivations,
    layout: &DictionaryLayout,
    eps: f64,
) -> Result<()> {
    if layout.noise_width == 0 {
        return Ok(());
    }
    check_problem(&y, &x.view(), h)?;
    if layout.total_columns() != x.ncols() {
        return Err(Error::InvalidInput(format!(
            "layout covers {} columns but dictionary has {}",
            layout.total_columns(),
            x.ncols()
        )));
    }
    let mut v = reconstruct(x.view(), h)?;
    apply_xbar_update(&y, x, h, layout, &mut v, eps);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmfReport {
    /// Divergence before the first update.
    pub initial_divergence: f64,
    /// Divergence after each completed iteration.
    pub divergence_trace: Vec<f64>,
    pub converged: bool,
}

impl NmfReport {
    pub fn iterations(&self) -> usize {
        self.divergence_trace.len()
    }

    pub fn final_divergence(&self) -> f64 {
        self.divergence_trace
            .last()
            .copied()
            .unwrap_or(self.initial_divergence)
    }
}

/// Runs the partial IS-NMF, updating `x` (noise columns only) and `h` in place.
pub fn isnmf(
    y: ArrayView2<f64>,
    x: &mut Array2<f64>,
    h: &mut BlockSparseActivations,
    layout: &DictionaryLayout,
    cfg: &NmfConfig,
) -> Result<NmfReport> {
    cfg.validate()?;
    check_problem(&y, &x.view(), h)?;
    if layout.total_columns() != x.ncols() {
        return Err(Error::InvalidInput(format!(
            "layout covers {} columns but dictionary has {}",
            layout.total_columns(),
            x.ncols()
        )));
    }
    let eps = cfg.eps;
    let n_cells = (y.nrows() * y.ncols()) as f64;
    let mut v = reconstruct(x.view(), h)?;
    let initial = is_divergence(y.view(), v.view(), eps)?;
    if !initial.is_finite() {
        return Err(Error::Numerical {
            iteration: 0,
            message: format!("initial divergence is {initial}"),
        });
    }
    let mut report = NmfReport {
        initial_divergence: initial,
        divergence_trace: Vec::with_capacity(cfg.max_iters),
        converged: false,
    };

    let mut prev = initial;
    for iteration in 1..=cfg.max_iters {
        apply_h_update(&y, &x.view(), &v, h, eps)?;
        v = reconstruct(x.view(), h)?;
        apply_xbar_update(&y, x, h, layout, &mut v, eps);

        let cur = is_divergence(y.view(), v.view(), eps)?;
        if !cur.is_finite() {
            return Err(Error::Numerical {
                iteration,
                message: format!("divergence is {cur}"),
            });
        }
        report.divergence_trace.push(cur);
        if cur <= f64::EPSILON * n_cells || prev - cur < cfg.rel_tol * prev {
            report.converged = true;
            break;
        }
        prev = cur;
    }
    Ok(report)
}
