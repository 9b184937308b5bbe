//! Dense row-major matrices with a 16-bit storage / 32-bit accumulate
//! precision discipline.
//!
//! Every value lives in an `f32`. Matrices marked [`StorageClass::Half`] keep
//! their elements on the IEEE binary16 grid: writes are rounded to the nearest
//! representable half value (ties to even) and overflow saturates to ±∞.
//! Products and sums are always carried out in 32-bit.

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::counters::Counters;
use crate::error::{Error, Result};

/// Rounding applied when narrowing to the 16-bit grid.
pub const HALF_ROUNDING: &str = "round-to-nearest-even";

/// Largest finite binary16 value.
pub const HALF_MAX: f32 = 65504.0;

/// Rounds `x` to the nearest binary16 value and widens it back.
///
/// Ties go to the even significand, values beyond the finite range become
/// ±∞ and NaN stays NaN.
#[inline]
pub fn quantize_half(x: f32) -> f32 {
    f16::from_f32(x).to_f32()
}

/// Raw binary16 bit pattern of `x` after rounding.
#[inline]
pub fn half_bits(x: f32) -> u16 {
    f16::from_f32(x).to_bits()
}

/// Widens a binary16 bit pattern.
#[inline]
pub fn from_half_bits(bits: u16) -> f32 {
    f16::from_bits(bits).to_f32()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StorageClass {
    /// Values constrained to the binary16 grid.
    Half,
    /// Plain 32-bit values.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    storage: StorageClass,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>, storage: StorageClass) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        let mut m = Matrix { rows, cols, data, storage };
        if storage == StorageClass::Half {
            m.data.iter_mut().for_each(|v| *v = quantize_half(*v));
        }
        Ok(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols], storage: StorageClass::Full }
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Matrix { rows, cols, data: vec![value; rows * cols], storage: StorageClass::Full }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, StorageClass::Half, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        storage: StorageClass,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix::new(rows, cols, data, storage).expect("length matches by construction")
    }

    /// Builds a half-stored matrix from nested rows (test and example helper).
    pub fn from_rows_half(rows: &[&[f32]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        assert!(rows.iter().all(|x| x.len() == c), "ragged rows");
        Self::from_fn(r, c, StorageClass::Half, |i, j| rows[i][j])
    }

    pub fn from_rows_full(rows: &[&[f32]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        assert!(rows.iter().all(|x| x.len() == c), "ragged rows");
        Self::from_fn(r, c, StorageClass::Full, |i, j| rows[i][j])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn storage(&self) -> StorageClass {
        self.storage
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the raw buffer. Bypasses quantize-on-write; used by
    /// the fault injector, which corrupts values after the fact.
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = match self.storage {
            StorageClass::Half => quantize_half(v),
            StorageClass::Full => v,
        };
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        Matrix { rows: self.cols, cols: self.rows, data, storage: self.storage }
    }

    /// Same values, relabelled as 32-bit storage.
    pub fn into_full(mut self) -> Matrix {
        self.storage = StorageClass::Full;
        self
    }

    /// Rounds every element onto the 16-bit grid.
    pub fn to_half(&self) -> Matrix {
        Matrix::new(self.rows, self.cols, self.data.clone(), StorageClass::Half)
            .expect("same shape")
    }

    /// True when every element is its own binary16 image.
    pub fn is_on_half_grid(&self) -> bool {
        self.data.iter().all(|&v| {
            let q = quantize_half(v);
            q.to_bits() == v.to_bits() || (q.is_nan() && v.is_nan())
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |a, &v| a.max(v.abs()))
    }

    /// Largest element-wise absolute difference. NaN anywhere yields NaN.
    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch");
        let mut worst = 0.0f32;
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = (a - b).abs();
            if d.is_nan() {
                return f32::NAN;
            }
            worst = worst.max(d);
        }
        worst
    }

    pub fn bit_identical(&self, other: &Matrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Copies a rectangular window.
    pub fn slice(&self, row0: usize, rows: usize, col0: usize, cols: usize) -> Matrix {
        assert!(row0 + rows <= self.rows && col0 + cols <= self.cols, "window out of range");
        let mut data = Vec::with_capacity(rows * cols);
        for r in row0..row0 + rows {
            data.extend_from_slice(&self.row(r)[col0..col0 + cols]);
        }
        Matrix { rows, cols, data, storage: self.storage }
    }

    /// Writes `src` into the window starting at (`row0`, `col0`).
    pub fn write_block(&mut self, row0: usize, col0: usize, src: &Matrix) {
        assert!(row0 + src.rows <= self.rows && col0 + src.cols <= self.cols);
        for r in 0..src.rows {
            let dst = &mut self.data[(row0 + r) * self.cols + col0..][..src.cols];
            dst.copy_from_slice(src.row(r));
        }
    }

    /// Side-by-side concatenation. Half only if every part is half.
    pub fn hconcat(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if parts.iter().any(|m| m.rows != rows) {
            return Err(Error::shape("hconcat parts disagree on row count"));
        }
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Ok(Matrix { rows, cols, data, storage: common_storage(parts) })
    }

    pub fn vconcat(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::shape("vconcat parts disagree on column count"));
        }
        let rows: usize = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows, cols, data, storage: common_storage(parts) })
    }
}

fn common_storage(parts: &[&Matrix]) -> StorageClass {
    if !parts.is_empty() && parts.iter().all(|m| m.storage == StorageClass::Half) {
        StorageClass::Half
    } else {
        StorageClass::Full
    }
}

/// Borrowed rectangular window of a [`Matrix`].
#[derive(Debug, Clone, Copy)]
pub struct TileView<'a> {
    src: &'a Matrix,
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl<'a> TileView<'a> {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.src.get(self.row0 + r, self.col0 + c)
    }

    /// Row `r` of the window. Row-major storage keeps it contiguous.
    #[inline]
    pub fn row(&self, r: usize) -> &'a [f32] {
        &self.src.row(self.row0 + r)[self.col0..self.col0 + self.cols]
    }

    pub fn to_matrix(&self) -> Matrix {
        self.src.slice(self.row0, self.rows, self.col0, self.cols)
    }
}

fn check_block(dim: usize, block: usize, what: &str) -> Result<()> {
    if block == 0 || !dim.is_multiple_of(block) {
        return Err(Error::config(format!(
            "block size {block} does not divide {what} dimension {dim}"
        )));
    }
    Ok(())
}

/// Splits `m` into consecutive row blocks of height `block`.
pub fn tile_rows(m: &Matrix, block: usize) -> Result<Vec<TileView<'_>>> {
    check_block(m.rows, block, "row")?;
    Ok((0..m.rows / block)
        .map(|b| TileView { src: m, row0: b * block, col0: 0, rows: block, cols: m.cols })
        .collect())
}

/// Splits `m` into consecutive column blocks of width `block`.
pub fn tile_cols(m: &Matrix, block: usize) -> Result<Vec<TileView<'_>>> {
    check_block(m.cols, block, "column")?;
    Ok((0..m.cols / block)
        .map(|b| TileView { src: m, row0: 0, col0: b * block, rows: m.rows, cols: block })
        .collect())
}

pub fn concat_row_tiles(tiles: &[TileView<'_>]) -> Result<Matrix> {
    let owned: Vec<Matrix> = tiles.iter().map(TileView::to_matrix).collect();
    Matrix::vconcat(&owned.iter().collect::<Vec<_>>())
}

pub fn concat_col_tiles(tiles: &[TileView<'_>]) -> Result<Matrix> {
    let owned: Vec<Matrix> = tiles.iter().map(TileView::to_matrix).collect();
    Matrix::hconcat(&owned.iter().collect::<Vec<_>>())
}

/// `C_init + A·B` with 32-bit products and accumulation, no accounting.
///
/// Each output element starts from its `C_init` value and accumulates the
/// products in increasing `k` order, so [`dot_entry`] reproduces any element
/// bit for bit.
pub(crate) fn gemm_raw(a: &Matrix, b: &Matrix, c_init: Option<&Matrix>) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "gemm inner dimensions differ: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = match c_init {
        Some(c) => {
            if c.rows != a.rows || c.cols != b.cols {
                return Err(Error::shape(format!(
                    "gemm accumulator is {}x{}, expected {}x{}",
                    c.rows, c.cols, a.rows, b.cols
                )));
            }
            Matrix { rows: c.rows, cols: c.cols, data: c.data.clone(), storage: StorageClass::Full }
        }
        None => Matrix::zeros(a.rows, b.cols),
    };
    let n = b.cols;
    for i in 0..a.rows {
        let arow = a.row(i);
        let acc = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = b.row(k);
            for (o, &bkj) in acc.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Recomputes one element of [`gemm_raw`] with the identical operation order.
pub(crate) fn dot_entry(a: &Matrix, b: &Matrix, init: f32, i: usize, j: usize) -> f32 {
    let mut acc = init;
    for (k, &aik) in a.row(i).iter().enumerate() {
        acc += aik * b.get(k, j);
    }
    acc
}

/// Mixed-precision GEMM: `C_init + A·B` with 16-bit inputs, 32-bit
/// accumulation. Adds `2·M·N·K` to `flops_main`.
pub fn gemm_mixed(
    a: &Matrix,
    b: &Matrix,
    c_init: Option<&Matrix>,
    counters: &mut Counters,
) -> Result<Matrix> {
    let out = gemm_raw(a, b, c_init)?;
    counters.flops_main += gemm_flops(a.rows, a.cols, b.cols);
    Ok(out)
}

#[inline]
pub fn gemm_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m as u64) * (n as u64) * (k as u64)
}

/// Deterministic generator used everywhere randomness is needed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard-normal entries rounded onto the 16-bit grid.
pub fn random_half<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, StorageClass::Half, |_, _| rng.sample::<f32, _>(StandardNormal))
}

/// Uniform integers in `[-bound, bound]`, exactly representable in 16 bits.
pub fn random_small_ints<R: Rng + ?Sized>(rows: usize, cols: usize, bound: i32, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, StorageClass::Half, |_, _| rng.random_range(-bound..=bound) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_half(0.0), 0.0);
        assert_eq!(quantize_half(1.0 + 2f32.powi(-12)), 1.0);
        assert_eq!(quantize_half(65520.0), f32::INFINITY);
        assert_eq!(quantize_half(-65520.0), f32::NEG_INFINITY);
        assert_eq!(quantize_half(65504.0), 65504.0);
        assert!(quantize_half(f32::NAN).is_nan());
    }

    #[test]
    fn quantize_ties_to_even() {
        // 1 + 2^-11 sits halfway between 1 and 1 + 2^-10.
        assert_eq!(quantize_half(1.0 + 2f32.powi(-11)), 1.0);
        // 1 + 3·2^-11 sits halfway between 1 + 2^-10 (odd) and 1 + 2^-9 (even).
        assert_eq!(quantize_half(1.0 + 3.0 * 2f32.powi(-11)), 1.0 + 2f32.powi(-9));
    }

    #[test]
    fn half_matrix_quantizes_on_write() {
        let mut m = Matrix::zeros(1, 1).to_half();
        m.set(0, 0, 1.0 + 2f32.powi(-12));
        assert_eq!(m.get(0, 0), 1.0);
        assert!(m.is_on_half_grid());
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(matches!(
            Matrix::new(2, 2, vec![0.0; 3], StorageClass::Full),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn gemm_identity_and_accumulate() {
        let mut c = Counters::default();
        let b = Matrix::from_rows_half(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let out = gemm_mixed(&Matrix::identity(2), &b, None, &mut c).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(c.flops_main, 16);

        let a = Matrix::from_rows_half(&[&[1.0, 1.0]]);
        let b = Matrix::from_rows_half(&[&[1.0], &[1.0]]);
        let init = Matrix::from_rows_full(&[&[5.0]]);
        let out = gemm_mixed(&a, &b, Some(&init), &mut c).unwrap();
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn gemm_shape_errors() {
        let mut c = Counters::default();
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(gemm_mixed(&a, &b, None, &mut c), Err(Error::Shape(_))));
        let b = Matrix::zeros(3, 2);
        let bad = Matrix::zeros(3, 3);
        assert!(matches!(gemm_mixed(&a, &b, Some(&bad), &mut c), Err(Error::Shape(_))));
        assert_eq!(c.flops_main, 0);
    }

    #[test]
    fn dot_entry_matches_gemm_bitwise() {
        let mut rng = seeded_rng(3);
        let a = random_half(5, 7, &mut rng);
        let b = random_half(7, 4, &mut rng);
        let init = random_half(5, 4, &mut rng).into_full();
        let c = gemm_raw(&a, &b, Some(&init)).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let e = dot_entry(&a, &b, init.get(i, j), i, j);
                assert_eq!(e.to_bits(), c.get(i, j).to_bits());
            }
        }
    }

    #[test]
    fn tiling_examples() {
        let m = Matrix::from_fn(4, 2, StorageClass::Full, |i, j| (i * 2 + j) as f32);
        let t = tile_rows(&m, 2).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[1].to_matrix().data(), &[4.0, 5.0, 6.0, 7.0]);
        let one = tile_rows(&m, 4).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one[0].to_matrix().bit_identical(&m));
        assert!(matches!(tile_rows(&m, 3), Err(Error::Config(_))));
        assert!(matches!(tile_cols(&m, 0), Err(Error::Config(_))));
        let cols = tile_cols(&m, 1).unwrap();
        assert_eq!(cols[1].to_matrix().data(), &[1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let mut rng = seeded_rng(9);
        let m = random_half(3, 5, &mut rng);
        let t = m.transpose();
        assert_eq!((t.rows(), t.cols()), (5, 3));
        assert_eq!(t.get(4, 2), m.get(2, 4));
        assert!(t.transpose().bit_identical(&m));
    }

    #[test]
    fn derive_seed_spreads() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(5, 7), derive_seed(5, 7));
    }
}
