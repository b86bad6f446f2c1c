//! Inter-pass filtering of activation blocks.
//!
//! Three steps run on a dense view of each track block: a grayscale opening
//! with one-pixel-wide line kernels (max over a range of slopes), a separable
//! Gaussian blur, and relative thresholding. Rows are track frames, columns
//! are mix frames, so a kernel of slope `s` advances `s` track frames per mix
//! frame.

use ndarray::{Array2, ArrayView2, ShapeBuilder};
use serde::{Deserialize, Serialize};

use crate::blocksparse::{ActivationBlock, BlockSparseActivations};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterParams {
    /// Slowest playback speed considered, in track frames per mix frame.
    pub slope_min: f64,
    pub slope_max: f64,
    /// Line kernel length in frames; shorter activations are removed.
    pub kernel_len: usize,
    pub n_slopes: usize,
    pub blur_sigma: f64,
    /// Fraction of the block maximum below which entries are zeroed.
    pub threshold_rel: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            slope_min: 0.5,
            slope_max: 2.0,
            kernel_len: 5,
            n_slopes: 7,
            blur_sigma: 1.0,
            threshold_rel: 0.01,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.slope_min > 0.0
            && self.slope_min <= self.slope_max
            && self.slope_max.is_finite()
            && self.kernel_len >= 2
            && self.n_slopes >= 1
            && self.blur_sigma > 0.0
            && self.threshold_rel > 0.0
            && self.threshold_rel < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!(
                "invalid filter parameters: {self:?}"
            )))
        }
    }

    /// Slopes geometrically spaced over `[slope_min, slope_max]`.
    ///
    /// A single slope is the geometric mean of the bounds.
    pub fn slopes(&self) -> Vec<f64> {
        if self.n_slopes == 1 {
            return vec![(self.slope_min * self.slope_max).sqrt()];
        }
        let ratio = self.slope_max / self.slope_min;
        (0..self.n_slopes)
            .map(|i| self.slope_min * ratio.powf(i as f64 / (self.n_slopes - 1) as f64))
            .collect()
    }
}

/// Cells `(row, col)` of a discrete line starting at the origin, one per column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineKernel {
    pub cells: Vec<(usize, usize)>,
}

impl LineKernel {
    /// Rasterizes the segment from `(0, 0)` to `(round(s (d-1)), d-1)`:
    /// column `c` holds the cell at row `round(s c)`.
    pub fn new(slope: f64, len: usize) -> Result<Self> {
        if !(slope > 0.0) || !slope.is_finite() || len < 2 {
            return Err(Error::InvalidParams(format!(
                "line kernel needs slope > 0 and length >= 2, got slope {slope}, length {len}"
            )));
        }
        let cells = (0..len)
            .map(|c| ((slope * c as f64).round() as usize, c))
            .collect();
        Ok(Self { cells })
    }

    pub fn height(&self) -> usize {
        self.cells.iter().map(|c| c.0).max().unwrap_or(0) + 1
    }
}

/// Flat erosion; out-of-bounds kernel cells are ignored.
fn erode(f: &ArrayView2<f64>, kernel: &LineKernel) -> Array2<f64> {
    let (rows, cols) = f.dim();
    Array2::from_shape_fn((rows, cols).f(), |(r, c)| {
        kernel
            .cells
            .iter()
            .filter(|&&(dr, dc)| r + dr < rows && c + dc < cols)
            .map(|&(dr, dc)| f[[r + dr, c + dc]])
            .fold(f64::INFINITY, f64::min)
    })
}

/// Flat dilation with the reflected kernel; out-of-bounds cells are ignored.
fn dilate(f: &ArrayView2<f64>, kernel: &LineKernel) -> Array2<f64> {
    let (rows, cols) = f.dim();
    Array2::from_shape_fn((rows, cols).f(), |(r, c)| {
        kernel
            .cells
            .iter()
            .filter(|&&(dr, dc)| dr <= r && dc <= c)
            .map(|&(dr, dc)| f[[r - dr, c - dc]])
            .fold(f64::NEG_INFINITY, f64::max)
    })
}

/// Grayscale opening with a single line kernel.
pub fn open_with(block: ArrayView2<f64>, kernel: &LineKernel) -> Array2<f64> {
    let eroded = erode(&block, kernel);
    dilate(&eroded.view(), kernel)
}

/// Pointwise maximum of the openings over all sampled slopes.
pub fn morph_open_lines(block: ArrayView2<f64>, params: &FilterParams) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(block.raw_dim().f());
    if block.is_empty() {
        return Ok(out);
    }
    for slope in params.slopes() {
        let kernel = LineKernel::new(slope, params.kernel_len)?;
        let opened = open_with(block.view(), &kernel);
        out.zip_mut_with(&opened, |o, &v| *o = o.max(v));
    }
    Ok(out)
}

/// Normalized Gaussian taps for offsets `-radius..=radius`, `radius = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|j| (-(j * j) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

fn convolve_axis(f: &ArrayView2<f64>, taps: &[f64], along_rows: bool) -> Array2<f64> {
    let (rows, cols) = f.dim();
    let radius = (taps.len() / 2) as i64;
    Array2::from_shape_fn((rows, cols).f(), |(r, c)| {
        let (pos, len) = if along_rows { (r, rows) } else { (c, cols) };
        let (mut acc, mut weight) = (0.0, 0.0);
        for (i, &w) in taps.iter().enumerate() {
            let q = pos as i64 + i as i64 - radius;
            if q < 0 || q >= len as i64 {
                continue;
            }
            let v = if along_rows {
                f[[q as usize, c]]
            } else {
                f[[r, q as usize]]
            };
            acc += w * v;
            weight += w;
        }
        acc / weight
    })
}

/// Separable Gaussian blur; taps falling outside the block are dropped and
/// the remaining weights renormalized.
pub fn gaussian_blur(block: ArrayView2<f64>, sigma: f64) -> Array2<f64> {
    if block.is_empty() {
        return block.to_owned();
    }
    let taps = gaussian_kernel(sigma);
    let tmp = convolve_axis(&block, &taps, true);
    convolve_axis(&tmp.view(), &taps, false)
}

/// Zeroes entries strictly below `threshold_rel * max(block)`.
pub fn threshold_zero(block: ArrayView2<f64>, threshold_rel: f64) -> Array2<f64> {
    let max = block.iter().cloned().fold(0.0, f64::max);
    let cut = threshold_rel * max;
    block.mapv(|v| if v < cut { 0.0 } else { v })
}

/// Opening, blur and thresholding of one dense block.
pub fn filter_dense(block: ArrayView2<f64>, params: &FilterParams) -> Result<Array2<f64>> {
    let opened = morph_open_lines(block, params)?;
    let blurred = gaussian_blur(opened.view(), params.blur_sigma);
    Ok(threshold_zero(blurred.view(), params.threshold_rel))
}

/// Filters every track block independently; the noise block is left as is.
pub fn interpass_filter(
    h: &BlockSparseActivations,
    params: &FilterParams,
) -> Result<BlockSparseActivations> {
    params.validate()?;
    let blocks = h
        .blocks()
        .iter()
        .map(|b| {
            if b.is_noise() || b.nnz() == 0 {
                return Ok(b.clone());
            }
            let filtered = filter_dense(b.to_dense().view(), params)?;
            ActivationBlock::from_dense(filtered.view(), b.row_offset(), b.kind)
        })
        .collect::<Result<Vec<_>>>()?;
    BlockSparseActivations::new(blocks, h.n_cols())
}
