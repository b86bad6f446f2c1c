//! Block-sparse storage for the stacked activation matrix.
//!
//! The activation matrix stacks one block per source track followed by the
//! noise block. Each block is stored column-compressed: for every mix frame
//! the positive entries are kept as `(row, value)` pairs with rows ascending.
//! The set of stored entries *is* the support; multiplicative updates only
//! touch stored values, so an entry absent from storage stays zero forever.
//!
//! The noise block always has full support and is never pruned.

use std::borrow::Cow;
use std::io::{Read, Write};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ShapeBuilder};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};

/// Blocks at least this dense go through dense matrix products.
const DENSE_DENSITY: f64 = 0.25;
/// Sparse kernels sweep this many frequency rows at a time so that the
/// dictionary columns shared by neighbouring mix frames stay in cache.
const ROW_TILE: usize = 256;
/// Mix frames handled together by one sparse kernel task.
const COL_CHUNK: usize = 32;

/// Identifies which part of the dictionary a block activates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Track(usize),
    Noise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBlock {
    pub kind: BlockKind,
    row_offset: usize,
    n_rows: usize,
    col_ptr: Vec<usize>,
    rows: Vec<u32>,
    values: Vec<f64>,
}

impl ActivationBlock {
    /// Compresses a dense non-negative matrix. Track blocks keep only the
    /// positive entries; a noise block keeps every entry.
    pub fn from_dense(matrix: ArrayView2<f64>, row_offset: usize, kind: BlockKind) -> Result<Self> {
        if let Some(v) = matrix.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "activation entries must be finite and non-negative, found {v}"
            )));
        }
        let (n_rows, n_cols) = matrix.dim();
        let mut col_ptr = Vec::with_capacity(n_cols + 1);
        let mut rows = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for col in matrix.columns() {
            for (r, &v) in col.iter().enumerate() {
                if v > 0.0 || kind == BlockKind::Noise {
                    rows.push(r as u32);
                    values.push(v);
                }
            }
            col_ptr.push(rows.len());
        }
        Ok(Self {
            kind,
            row_offset,
            n_rows,
            col_ptr,
            rows,
            values,
        })
    }

    /// Builds a block from per-column `(row, value)` lists with ascending rows.
    pub(crate) fn from_columns(
        n_rows: usize,
        row_offset: usize,
        kind: BlockKind,
        columns: Vec<Vec<(u32, f64)>>,
    ) -> Self {
        let mut col_ptr = Vec::with_capacity(columns.len() + 1);
        let nnz = columns.iter().map(Vec::len).sum();
        let mut rows = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        col_ptr.push(0);
        for col in columns {
            debug_assert!(col.windows(2).all(|w| w[0].0 < w[1].0));
            for (r, v) in col {
                rows.push(r);
                values.push(v);
            }
            col_ptr.push(rows.len());
        }
        Self {
            kind,
            row_offset,
            n_rows,
            col_ptr,
            rows,
            values,
        }
    }

    /// A block with no stored entries.
    pub fn empty(n_rows: usize, n_cols: usize, row_offset: usize, kind: BlockKind) -> Self {
        Self {
            kind,
            row_offset,
            n_rows,
            col_ptr: vec![0; n_cols + 1],
            rows: Vec::new(),
            values: Vec::new(),
        }
    }

    /// A block with full support whose values come from `fill(row, col)`.
    pub fn full(
        n_rows: usize,
        n_cols: usize,
        row_offset: usize,
        kind: BlockKind,
        mut fill: impl FnMut(usize, usize) -> f64,
    ) -> Self {
        let mut col_ptr = Vec::with_capacity(n_cols + 1);
        let mut rows = Vec::with_capacity(n_rows * n_cols);
        let mut values = Vec::with_capacity(n_rows * n_cols);
        col_ptr.push(0);
        for c in 0..n_cols {
            for r in 0..n_rows {
                rows.push(r as u32);
                values.push(fill(r, c));
            }
            col_ptr.push(rows.len());
        }
        Self {
            kind,
            row_offset,
            n_rows,
            col_ptr,
            rows,
            values,
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows, self.n_cols()).f());
        for c in 0..self.n_cols() {
            let (rows, vals) = self.column(c);
            for (&r, &v) in rows.iter().zip(vals) {
                out[[r as usize, c]] = v;
            }
        }
        out
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.col_ptr.len() - 1
    }

    pub fn row_offset(&self) -> usize {
        self.row_offset
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_noise(&self) -> bool {
        self.kind == BlockKind::Noise
    }

    /// Fraction of cells held in storage.
    pub fn density(&self) -> f64 {
        let cells = self.n_rows * self.n_cols();
        if cells == 0 {
            0.0
        } else {
            self.nnz() as f64 / cells as f64
        }
    }

    /// Stored rows and values of column `c`.
    pub fn column(&self, c: usize) -> (&[u32], &[f64]) {
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        (&self.rows[range.clone()], &self.values[range])
    }

    pub fn column_range(&self, c: usize) -> std::ops::Range<usize> {
        self.col_ptr[c]..self.col_ptr[c + 1]
    }

    pub fn rows(&self) -> &[u32] {
        &self.rows
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Drops stored entries for which `keep(value)` is false.
    fn retain(&mut self, mut keep: impl FnMut(f64) -> bool) {
        let mut write = 0;
        let mut start = 0;
        for c in 0..self.n_cols() {
            let end = self.col_ptr[c + 1];
            for i in start..end {
                if keep(self.values[i]) {
                    self.rows[write] = self.rows[i];
                    self.values[write] = self.values[i];
                    write += 1;
                }
            }
            start = end;
            self.col_ptr[c + 1] = write;
        }
        self.rows.truncate(write);
        self.values.truncate(write);
    }

    /// Removes stored entries below `min_value`. No-op on the noise block.
    pub fn prune(&mut self, min_value: f64) {
        if !self.is_noise() && min_value > 0.0 {
            self.retain(|v| v >= min_value);
        }
    }

    /// Removes stored entries that reached exactly zero. No-op on the noise block.
    pub fn drop_zeros(&mut self) {
        if !self.is_noise() {
            self.retain(|v| v > 0.0);
        }
    }

    /// Writes the `BSA1` binary dump: little-endian header
    /// (`"BSA1"`, `u32` rows, `u32` cols, `u64` nnz), per-column `u32` counts,
    /// then `(u32 row, f32 value)` pairs in column order.
    pub fn write_bsa(&self, mut w: impl Write) -> Result<()> {
        w.write_all(b"BSA1")?;
        w.write_all(&(self.n_rows as u32).to_le_bytes())?;
        w.write_all(&(self.n_cols() as u32).to_le_bytes())?;
        w.write_all(&(self.nnz() as u64).to_le_bytes())?;
        for c in 0..self.n_cols() {
            w.write_all(&((self.col_ptr[c + 1] - self.col_ptr[c]) as u32).to_le_bytes())?;
        }
        for (&r, &v) in self.rows.iter().zip(&self.values) {
            w.write_all(&r.to_le_bytes())?;
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a `BSA1` dump. Values come back at `f32` precision.
    pub fn read_bsa(mut r: impl Read, row_offset: usize, kind: BlockKind) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"BSA1" {
            return Err(Error::InvalidInput("not a BSA1 dump".into()));
        }
        let n_rows = read_u32(&mut r)? as usize;
        let n_cols = read_u32(&mut r)? as usize;
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let nnz = u64::from_le_bytes(buf8) as usize;
        let mut col_ptr = Vec::with_capacity(n_cols + 1);
        col_ptr.push(0);
        for _ in 0..n_cols {
            let count = read_u32(&mut r)? as usize;
            col_ptr.push(col_ptr.last().unwrap() + count);
        }
        if *col_ptr.last().unwrap() != nnz {
            return Err(Error::InvalidInput(format!(
                "BSA1 column counts sum to {} but header says {nnz}",
                col_ptr.last().unwrap()
            )));
        }
        let mut rows = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let row = read_u32(&mut r)?;
            if row as usize >= n_rows {
                return Err(Error::InvalidInput(format!("BSA1 row {row} out of range")));
            }
            rows.push(row);
            values.push(f32::from_bits(read_u32(&mut r)?) as f64);
        }
        Ok(Self {
            kind,
            row_offset,
            n_rows,
            col_ptr,
            rows,
            values,
        })
    }

    /// Dense CSV export, one line per row.
    pub fn write_dense_csv(&self, mut w: impl Write) -> Result<()> {
        let dense = self.to_dense();
        for row in dense.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Dynamic range of the heatmap below the block maximum.
const HEATMAP_RANGE_DB: f64 = 80.0;

impl ActivationBlock {
    /// Binary (`P5`) 8-bit grayscale heatmap on a log scale normalized to the
    /// block maximum, with mix frames left to right and track frames bottom
    /// to top. Blocks larger than `max_side` in either direction are
    /// max-pooled down to it.
    pub fn write_pgm(&self, mut w: impl Write, max_side: usize) -> Result<()> {
        let max_side = max_side.max(1);
        let (rows, cols) = (self.n_rows, self.n_cols());
        let height = rows.clamp(1, max_side);
        let width = cols.clamp(1, max_side);
        let mut pooled = vec![0.0f64; width * height];
        for c in 0..cols {
            let x = c * width / cols.max(1);
            let (rs, vs) = self.column(c);
            for (&r, &v) in rs.iter().zip(vs) {
                let y = r as usize * height / rows.max(1);
                let cell = &mut pooled[y * width + x];
                *cell = cell.max(v);
            }
        }
        let max = self.max_value();
        write!(w, "P5\n{width} {height}\n255\n")?;
        let mut line = vec![0u8; width];
        for y in (0..height).rev() {
            for (x, px) in line.iter_mut().enumerate() {
                let v = pooled[y * width + x];
                *px = if v > 0.0 && max > 0.0 {
                    let level = 1.0 + 10.0 * (v / max).log10() / HEATMAP_RANGE_DB;
                    (level.clamp(0.0, 1.0) * 255.0).round() as u8
                } else {
                    0
                };
            }
            w.write_all(&line)?;
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Vertically stacked activation blocks sharing one mix-frame axis.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparseActivations {
    blocks: Vec<ActivationBlock>,
    n_cols: usize,
}

impl BlockSparseActivations {
    /// Stacks blocks; row ranges must be contiguous starting at 0 and every
    /// block must have `n_cols` columns.
    pub fn new(blocks: Vec<ActivationBlock>, n_cols: usize) -> Result<Self> {
        let mut next = 0;
        for (i, b) in blocks.iter().enumerate() {
            if b.row_offset != next {
                return Err(Error::InvalidInput(format!(
                    "block {i} starts at row {} but the previous block ends at {next}",
                    b.row_offset
                )));
            }
            if b.n_cols() != n_cols {
                return Err(Error::InvalidInput(format!(
                    "block {i} has {} columns, expected {n_cols}",
                    b.n_cols()
                )));
            }
            next += b.n_rows;
        }
        Ok(Self { blocks, n_cols })
    }

    /// Builds from dense parts, laid out in the given order.
    pub fn from_dense_blocks(parts: &[(BlockKind, ArrayView2<f64>)]) -> Result<Self> {
        let n_cols = parts.first().map_or(0, |(_, m)| m.ncols());
        let mut offset = 0;
        let mut blocks = Vec::with_capacity(parts.len());
        for (kind, m) in parts {
            blocks.push(ActivationBlock::from_dense(m.view(), offset, *kind)?);
            offset += m.nrows();
        }
        Self::new(blocks, n_cols)
    }

    pub fn blocks(&self) -> &[ActivationBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ActivationBlock] {
        &mut self.blocks
    }

    pub fn into_blocks(self) -> Vec<ActivationBlock> {
        self.blocks
    }

    pub fn track_blocks(&self) -> impl Iterator<Item = &ActivationBlock> {
        self.blocks.iter().filter(|b| !b.is_noise())
    }

    pub fn noise_block(&self) -> Option<&ActivationBlock> {
        self.blocks.iter().find(|b| b.is_noise())
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_rows(&self) -> usize {
        self.blocks.iter().map(|b| b.n_rows).sum()
    }

    pub fn nnz(&self) -> usize {
        self.blocks.iter().map(|b| b.nnz()).sum()
    }

    /// Stored-entry count over `rows x cols`.
    pub fn density(&self) -> f64 {
        let cells = self.n_rows() * self.n_cols;
        if cells == 0 {
            0.0
        } else {
            self.nnz() as f64 / cells as f64
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows(), self.n_cols).f());
        for b in &self.blocks {
            out.slice_mut(ndarray::s![b.row_offset..b.row_offset + b.n_rows, ..])
                .assign(&b.to_dense());
        }
        out
    }

    /// Removes track-block entries below `min_value`.
    pub fn prune(&mut self, min_value: f64) {
        self.blocks.iter_mut().for_each(|b| b.prune(min_value));
    }
}

/// Values computed on the support of a [`BlockSparseActivations`], aligned
/// entry-for-entry with each block's storage.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedValues {
    pub per_block: Vec<Vec<f64>>,
}

impl MaskedValues {
    pub fn to_dense(&self, support: &BlockSparseActivations) -> Array2<f64> {
        let mut h = support.clone();
        for (b, vals) in h.blocks.iter_mut().zip(&self.per_block) {
            b.values.copy_from_slice(vals);
        }
        h.to_dense()
    }
}

/// Column-major contiguous copy (or borrow) of a dense matrix.
pub(crate) fn column_major<'a>(m: &ArrayView2<'a, f64>) -> Cow<'a, [f64]> {
    let t = (*m).reversed_axes();
    match t.to_slice() {
        Some(s) => Cow::Borrowed(s),
        None => Cow::Owned(t.iter().cloned().collect()),
    }
}

const LANES: usize = 8;

#[inline(always)]
fn dot_body(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; LANES];
    let (ac, bc) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = acc.iter().sum::<f64>();
    for (x, y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

/// `(x . a, x . b)` in one sweep over `x`.
#[inline(always)]
fn dot2_body(x: &[f64], a: &[f64], b: &[f64]) -> (f64, f64) {
    let n = x.len().min(a.len()).min(b.len());
    let (x, a, b) = (&x[..n], &a[..n], &b[..n]);
    let mut sa = [0.0f64; LANES];
    let mut sb = [0.0f64; LANES];
    let main = n - n % LANES;
    for j in (0..main).step_by(LANES) {
        let (xc, ac, bc) = (&x[j..j + LANES], &a[j..j + LANES], &b[j..j + LANES]);
        for l in 0..LANES {
            sa[l] += xc[l] * ac[l];
            sb[l] += xc[l] * bc[l];
        }
    }
    let (mut ra, mut rb) = (sa.iter().sum::<f64>(), sb.iter().sum::<f64>());
    for j in main..n {
        ra += x[j] * a[j];
        rb += x[j] * b[j];
    }
    (ra, rb)
}

#[inline(always)]
fn axpy_body(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

// The same loops compiled for AVX2 when the CPU has it; lane order and
// therefore results are identical to the portable versions.
#[cfg(target_arch = "x86_64")]
mod avx2 {
    #[target_feature(enable = "avx2")]
    pub unsafe fn dot(a: &[f64], b: &[f64]) -> f64 {
        super::dot_body(a, b)
    }

    #[target_feature(enable = "avx2")]
    pub unsafe fn dot2(x: &[f64], a: &[f64], b: &[f64]) -> (f64, f64) {
        super::dot2_body(x, a, b)
    }

    #[target_feature(enable = "avx2")]
    pub unsafe fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
        super::axpy_body(alpha, x, y)
    }

    pub fn available() -> bool {
        std::arch::is_x86_feature_detected!("avx2")
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if avx2::available() {
        // SAFETY: the CPU supports AVX2.
        return unsafe { avx2::dot(a, b) };
    }
    dot_body(a, b)
}

fn dot2(x: &[f64], a: &[f64], b: &[f64]) -> (f64, f64) {
    #[cfg(target_arch = "x86_64")]
    if avx2::available() {
        // SAFETY: the CPU supports AVX2.
        return unsafe { avx2::dot2(x, a, b) };
    }
    dot2_body(x, a, b)
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if avx2::available() {
        // SAFETY: the CPU supports AVX2.
        return unsafe { avx2::axpy(alpha, x, y) };
    }
    axpy_body(alpha, x, y)
}

fn is_dense(b: &ActivationBlock) -> bool {
    b.n_rows() > 0 && b.density() >= DENSE_DENSITY
}

/// Dense product `X H` (M x K), computed from the stored entries only.
pub fn reconstruct(x: ArrayView2<f64>, h: &BlockSparseActivations) -> Result<Array2<f64>> {
    let (m, t_total) = x.dim();
    check_shape("reconstruct", (m, h.n_rows()), (m, t_total))?;
    let k = h.n_cols();
    let mut out = Array2::zeros((m, k).f());
    if m == 0 || k == 0 {
        return Ok(out);
    }
    for b in h.blocks.iter().filter(|b| is_dense(b)) {
        let xb = x.slice(s![.., b.row_offset..b.row_offset + b.n_rows]);
        general_mat_mul(1.0, &xb, &b.to_dense(), 1.0, &mut out);
    }
    let sparse: Vec<&ActivationBlock> = h.blocks.iter().filter(|b| !is_dense(b)).collect();
    if sparse.iter().all(|b| b.nnz() == 0) {
        return Ok(out);
    }
    let xs = column_major(&x);
    out.as_slice_memory_order_mut()
        .expect("fresh column-major array")
        .par_chunks_mut(m * COL_CHUNK)
        .enumerate()
        .for_each(|(chunk, cols)| {
            let first = chunk * COL_CHUNK;
            for lo in (0..m).step_by(ROW_TILE) {
                let hi = (lo + ROW_TILE).min(m);
                for (j, col) in cols.chunks_mut(m).enumerate() {
                    for b in &sparse {
                        let (rows, vals) = b.column(first + j);
                        for (&r, &v) in rows.iter().zip(vals) {
                            let t = (b.row_offset + r as usize) * m;
                            axpy(v, &xs[t + lo..t + hi], &mut col[lo..hi]);
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// `(X^T A)` restricted to the support of `support`.
pub fn masked_gram(
    a: ArrayView2<f64>,
    x: ArrayView2<f64>,
    support: &BlockSparseActivations,
) -> Result<MaskedValues> {
    let (num, _) = masked_gram_impl(a, None, x, support)?;
    Ok(num)
}

/// `(X^T A, X^T B)` on the support in one pass over the dictionary.
pub(crate) fn masked_gram_pair(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    x: ArrayView2<f64>,
    support: &BlockSparseActivations,
) -> Result<(MaskedValues, MaskedValues)> {
    let (num, den) = masked_gram_impl(a, Some(b), x, support)?;
    Ok((num, den.expect("second operand supplied")))
}

fn masked_gram_impl(
    a: ArrayView2<f64>,
    b: Option<ArrayView2<f64>>,
    x: ArrayView2<f64>,
    support: &BlockSparseActivations,
) -> Result<(MaskedValues, Option<MaskedValues>)> {
    let (m, t_total) = x.dim();
    check_shape(
        "masked_gram dictionary",
        (m, support.n_rows()),
        (m, t_total),
    )?;
    let k = support.n_cols();
    check_shape("masked_gram operand", (m, k), a.dim())?;
    if let Some(b) = &b {
        check_shape("masked_gram operand", (m, k), b.dim())?;
    }
    let dense: Vec<bool> = support.blocks.iter().map(is_dense).collect();
    let mut num: Vec<Vec<f64>> = support.blocks.iter().map(|b| vec![0.0; b.nnz()]).collect();
    let mut den = b.as_ref().map(|_| num.clone());

    // Dense blocks: full X_b^T A, then gather the stored positions.
    for (bi, blk) in support
        .blocks
        .iter()
        .enumerate()
        .filter(|(bi, _)| dense[*bi])
    {
        let xb = x.slice(s![.., blk.row_offset..blk.row_offset + blk.n_rows]);
        let gather = |op: &ArrayView2<f64>, dst: &mut [f64]| {
            let g = xb.t().dot(op);
            for tau in 0..k {
                let range = blk.column_range(tau);
                for (d, &r) in dst[range.clone()].iter_mut().zip(&blk.rows[range]) {
                    *d = g[[r as usize, tau]];
                }
            }
        };
        gather(&a, &mut num[bi]);
        if let (Some(b), Some(den)) = (&b, den.as_mut()) {
            gather(b, &mut den[bi]);
        }
    }
    if support
        .blocks
        .iter()
        .zip(&dense)
        .all(|(blk, &d)| d || blk.nnz() == 0)
    {
        return Ok((
            MaskedValues { per_block: num },
            den.map(|per_block| MaskedValues { per_block }),
        ));
    }

    let xs = column_major(&x);
    let a_cm = column_major(&a);
    let b_cm = b.as_ref().map(|b| column_major(b));

    // Per mix frame: concatenated values across sparse blocks, for each operand.
    let n_chunks = k.div_ceil(COL_CHUNK);
    let per_col: Vec<(Vec<f64>, Vec<f64>)> = (0..n_chunks)
        .into_par_iter()
        .flat_map_iter(|chunk| {
            let cols = chunk * COL_CHUNK..((chunk + 1) * COL_CHUNK).min(k);
            let dict_rows: Vec<Vec<usize>> = cols
                .clone()
                .map(|tau| {
                    support
                        .blocks
                        .iter()
                        .zip(&dense)
                        .filter(|(_, &d)| !d)
                        .flat_map(|(blk, _)| {
                            blk.column(tau)
                                .0
                                .iter()
                                .map(|&r| blk.row_offset + r as usize)
                        })
                        .collect()
                })
                .collect();
            let mut acc: Vec<(Vec<f64>, Vec<f64>)> = dict_rows
                .iter()
                .map(|r| {
                    (
                        vec![0.0; r.len()],
                        vec![0.0; if b_cm.is_some() { r.len() } else { 0 }],
                    )
                })
                .collect();
            for lo in (0..m).step_by(ROW_TILE) {
                let hi = (lo + ROW_TILE).min(m);
                for ((tau, rows), (va, vb)) in cols.clone().zip(&dict_rows).zip(acc.iter_mut()) {
                    let a_col = &a_cm[tau * m + lo..tau * m + hi];
                    let b_col = b_cm.as_ref().map(|b| &b[tau * m + lo..tau * m + hi]);
                    for (i, &t) in rows.iter().enumerate() {
                        let x_col = &xs[t * m + lo..t * m + hi];
                        match b_col {
                            Some(b_col) => {
                                let (da, db) = dot2(x_col, a_col, b_col);
                                va[i] += da;
                                vb[i] += db;
                            }
                            None => va[i] += dot(x_col, a_col),
                        }
                    }
                }
            }
            acc
        })
        .collect();

    for (tau, (va, vb)) in per_col.into_iter().enumerate() {
        let mut pos = 0;
        for (bi, blk) in support
            .blocks
            .iter()
            .enumerate()
            .filter(|(bi, _)| !dense[*bi])
        {
            let range = blk.column_range(tau);
            let len = range.len();
            num[bi][range.clone()].copy_from_slice(&va[pos..pos + len]);
            if let Some(den) = den.as_mut() {
                den[bi][range].copy_from_slice(&vb[pos..pos + len]);
            }
            pos += len;
        }
    }
    Ok((
        MaskedValues { per_block: num },
        den.map(|per_block| MaskedValues { per_block }),
    ))
}
