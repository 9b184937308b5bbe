//! Checksum-based fault tolerance for GEMM tiles.
//!
//! Two schemes live here:
//!
//! * the strided tensor checksum: for a tile `T` of width `w = G·s`, the
//!   checksum column `j < s` holds `Σ_l T[i][j + s·l]` (unit weights) and
//!   `Σ_l (l+1)·T[i][j + s·l]` (group-index weights). A single error in a row
//!   is located by the ratio of the two discrepancies, which recovers the
//!   1-based group index. Errors in distinct checksum columns of the same row
//!   are corrected independently;
//! * the traditional element checksum: one weighted pair per column
//!   (`c1 = 1`, `c2 = [1..M]`), locating a single error per column by its
//!   1-based row index.
//!
//! Checksums propagate through GEMMs by linearity: encoding the right operand
//! and multiplying once yields the checksums of the product.

use serde::Serialize;

use crate::counters::{Counters, GemmTally};
use crate::error::{Error, Result};
use crate::report::{CheckSite, Status, VerificationReport};
use crate::tensor::{gemm_flops, gemm_raw, Matrix, StorageClass};

/// Largest distance from an integer accepted for a location ratio.
pub const RATIO_TOLERANCE: f32 = 0.25;

/// Checksum used as a GPU reference threshold for strided ABFT; desk runs
/// calibrate their own.
pub const GPU_REFERENCE_EPS: f32 = 0.48;

/// Unit-weight and index-weight strided checksums of a tile.
#[derive(Debug, Clone, PartialEq)]
pub struct ChecksumPair {
    pub c1: Matrix,
    pub c2: Matrix,
    pub stride: usize,
    pub groups: usize,
}

impl ChecksumPair {
    pub fn zeros(rows: usize, stride: usize, groups: usize) -> Self {
        ChecksumPair { c1: Matrix::zeros(rows, stride), c2: Matrix::zeros(rows, stride), stride, groups }
    }

    /// Width of the tile these checksums protect.
    pub fn width(&self) -> usize {
        self.stride * self.groups
    }

    pub fn rows(&self) -> usize {
        self.c1.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.c1.is_finite() && self.c2.is_finite()
    }

    /// Multiplies row `r` of both checksums by `factor`.
    pub fn scale_row(&mut self, r: usize, factor: f32) {
        self.c1.row_mut(r).iter_mut().for_each(|x| *x *= factor);
        self.c2.row_mut(r).iter_mut().for_each(|x| *x *= factor);
    }

    /// Divides row `r` of both checksums by `div`.
    pub fn div_row(&mut self, r: usize, div: f32) {
        self.c1.row_mut(r).iter_mut().for_each(|x| *x /= div);
        self.c2.row_mut(r).iter_mut().for_each(|x| *x /= div);
    }

    pub fn scale_all(&mut self, factor: f32) {
        self.c1.data_mut().iter_mut().for_each(|x| *x *= factor);
        self.c2.data_mut().iter_mut().for_each(|x| *x *= factor);
    }
}

fn strided_groups(width: usize, s: usize) -> Result<usize> {
    if s == 0 || !width.is_multiple_of(s) {
        return Err(Error::config(format!("stride {s} does not divide tile width {width}")));
    }
    Ok(width / s)
}

#[inline]
fn encode_flops(rows: usize, width: usize) -> u64 {
    // one add for c1, one multiply-add for c2 per element
    3 * rows as u64 * width as u64
}

fn strided_raw(t: &Matrix, s: usize) -> Result<ChecksumPair> {
    let groups = strided_groups(t.cols(), s)?;
    let mut cp = ChecksumPair::zeros(t.rows(), s, groups);
    for i in 0..t.rows() {
        let row = t.row(i);
        for j in 0..s {
            let mut a = 0.0f32;
            let mut b = 0.0f32;
            for l in 0..groups {
                let x = row[j + s * l];
                a += x;
                b += (l + 1) as f32 * x;
            }
            cp.c1.set(i, j, a);
            cp.c2.set(i, j, b);
        }
    }
    Ok(cp)
}

/// Encodes the strided checksum pair of `t`. Counted as checksum work.
pub fn encode_strided(t: &Matrix, s: usize, counters: &mut Counters) -> Result<ChecksumPair> {
    let cp = strided_raw(t, s)?;
    counters.flops_checksum += encode_flops(t.rows(), t.cols());
    Ok(cp)
}

/// Same arithmetic as [`encode_strided`], applied to a result tile and
/// counted as verification work.
pub fn strided_sums(t: &Matrix, s: usize, counters: &mut Counters) -> Result<ChecksumPair> {
    let cp = strided_raw(t, s)?;
    counters.flops_verify += encode_flops(t.rows(), t.cols());
    Ok(cp)
}

/// One violated checksum position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub row: usize,
    pub check_col: usize,
    /// `c1 - sum1`
    pub d1: f32,
    /// `c2 - sum2`
    pub d2: f32,
    /// Tile column the ratio points at, when it is a valid group index.
    pub located: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnosis {
    /// Largest discrepancy, `max(|d1|, |d2|/G)` over all positions.
    pub residual: f32,
    /// Per-row residual, infinite for non-finite rows.
    pub row_residual: Vec<f32>,
    pub violations: Vec<Violation>,
    /// Rows holding a non-finite value in the tile, checksums or sums.
    pub nonfinite_rows: Vec<usize>,
}

impl Diagnosis {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && self.nonfinite_rows.is_empty()
    }
}

fn locate(d1: f32, d2: f32, j: usize, s: usize, groups: usize) -> Option<usize> {
    if d1 == 0.0 {
        return None;
    }
    let rho = d2 / d1;
    let r = rho.round();
    if !rho.is_finite() || (rho - r).abs() > RATIO_TOLERANCE || r < 1.0 || r > groups as f32 {
        return None;
    }
    Some(j + s * (r as usize - 1))
}

/// Compares `t` against `cp` with a per-row absolute threshold on the unit
/// checksum. The index-weighted checksum is held to `eps·G`.
pub fn diagnose_with(
    t: &Matrix,
    cp: &ChecksumPair,
    eps_for_row: &dyn Fn(usize) -> f32,
    counters: &mut Counters,
) -> Result<Diagnosis> {
    if t.cols() != cp.width() || t.rows() != cp.rows() {
        return Err(Error::shape(format!(
            "checksums protect {}x{}, tile is {}x{}",
            cp.rows(),
            cp.width(),
            t.rows(),
            t.cols()
        )));
    }
    let sums = strided_sums(t, cp.stride, counters)?;
    let g = cp.groups as f32;
    let mut diag = Diagnosis { row_residual: vec![0.0; t.rows()], ..Diagnosis::default() };
    for i in 0..t.rows() {
        let finite = t.row(i).iter().chain(cp.c1.row(i)).chain(cp.c2.row(i)).all(|x| x.is_finite())
            && sums.c1.row(i).iter().chain(sums.c2.row(i)).all(|x| x.is_finite());
        if !finite {
            diag.nonfinite_rows.push(i);
            diag.row_residual[i] = f32::INFINITY;
            continue;
        }
        let eps = eps_for_row(i);
        for j in 0..cp.stride {
            let d1 = cp.c1.get(i, j) - sums.c1.get(i, j);
            let d2 = cp.c2.get(i, j) - sums.c2.get(i, j);
            if !(d1.is_finite() && d2.is_finite()) {
                diag.nonfinite_rows.push(i);
                diag.row_residual[i] = f32::INFINITY;
                break;
            }
            let r = d1.abs().max(d2.abs() / g);
            diag.row_residual[i] = diag.row_residual[i].max(r);
            diag.residual = diag.residual.max(r);
            if d1.abs() > eps || d2.abs() > eps * g {
                diag.violations.push(Violation {
                    row: i,
                    check_col: j,
                    d1,
                    d2,
                    located: locate(d1, d2, j, cp.stride, cp.groups),
                });
            }
        }
    }
    Ok(diag)
}

pub fn diagnose(t: &Matrix, cp: &ChecksumPair, eps: f32, counters: &mut Counters) -> Result<Diagnosis> {
    diagnose_with(t, cp, &|_| eps, counters)
}

/// Rebuilds `t[row][col]` from the unit checksum and the other members of
/// its group. Equivalent to adding `c1 - sum1`, without cancellation
/// against a large corrupted value.
pub fn reconstruct(t: &Matrix, cp: &ChecksumPair, row: usize, col: usize) -> f32 {
    let s = cp.stride;
    let j = col % s;
    let mut others = 0.0f32;
    for l in 0..cp.groups {
        let c = j + s * l;
        if c != col {
            others += t.get(row, c);
        }
    }
    cp.c1.get(row, j) - others
}

/// Applies every located correction of `diag` to `t` and summarises the
/// outcome. Non-finite tiles are reported and left untouched.
pub fn apply_corrections(t: &mut Matrix, cp: &ChecksumPair, diag: &Diagnosis, site: CheckSite) -> VerificationReport {
    if !diag.nonfinite_rows.is_empty() {
        let mut rep = VerificationReport::with_status(site, Status::NonFinite, f32::INFINITY);
        rep.location = Some((diag.nonfinite_rows[0], 0));
        return rep;
    }
    if diag.violations.is_empty() {
        return VerificationReport::clean(site, diag.residual);
    }
    let mut first: Option<((usize, usize), f32)> = None;
    let mut fixed = 0;
    let mut all_located = true;
    for v in &diag.violations {
        match v.located {
            Some(col) => {
                let new = reconstruct(t, cp, v.row, col);
                let delta = new - t.get(v.row, col);
                t.data_mut()[v.row * cp.width() + col] = new;
                first.get_or_insert(((v.row, col), delta));
                fixed += 1;
            }
            None => all_located = false,
        }
    }
    if all_located {
        let (loc, delta) = first.expect("at least one violation");
        VerificationReport::corrected(site, Some(loc), delta, diag.residual, fixed)
    } else {
        let mut rep = VerificationReport::with_status(site, Status::DetectedUncorrectable, diag.residual);
        rep.corrected_cells = fixed;
        rep.location = first.map(|(l, _)| l).or(Some((diag.violations[0].row, diag.violations[0].check_col)));
        rep
    }
}

/// Verifies `t` against its propagated checksums and corrects every
/// located single error per (row, checksum column).
pub fn verify_locate_correct(
    t: &Matrix,
    cp: &ChecksumPair,
    eps_abs: f32,
    counters: &mut Counters,
) -> Result<(Matrix, VerificationReport)> {
    let diag = diagnose(t, cp, eps_abs, counters)?;
    let mut out = t.clone();
    let rep = apply_corrections(&mut out, cp, &diag, CheckSite::Standalone);
    Ok((out, rep))
}

/// `init + A·[Bt | c1 | c2]` in a single pass, splitting the result into the
/// product and its propagated checksums.
pub fn propagate(
    a: &Matrix,
    bt: &Matrix,
    cp_b: &ChecksumPair,
    init: Option<(&Matrix, &ChecksumPair)>,
    counters: &mut Counters,
) -> Result<(Matrix, ChecksumPair, GemmTally)> {
    if cp_b.rows() != bt.rows() || cp_b.width() != bt.cols() {
        return Err(Error::shape("checksums were not encoded for this operand"));
    }
    let aug = Matrix::hconcat(&[bt, &cp_b.c1, &cp_b.c2])?;
    let init_aug = match init {
        Some((c, cp)) => Some(Matrix::hconcat(&[c, &cp.c1, &cp.c2])?),
        None => None,
    };
    let out = gemm_raw(a, &aug, init_aug.as_ref())?;
    let (w, s) = (bt.cols(), cp_b.stride);
    let c = out.slice(0, out.rows(), 0, w);
    let cp = ChecksumPair {
        c1: out.slice(0, out.rows(), w, s),
        c2: out.slice(0, out.rows(), w + s, s),
        stride: s,
        groups: cp_b.groups,
    };
    let tally = GemmTally { main: gemm_flops(a.rows(), a.cols(), w), checksum: gemm_flops(a.rows(), a.cols(), 2 * s) };
    counters.flops_main += tally.main;
    counters.flops_checksum += tally.checksum;
    Ok((c, cp, tally))
}

/// Encodes `Bt`'s strided checksums and multiplies `A·[Bt | checksums]` in
/// one pass.
pub fn checksummed_gemm(a: &Matrix, bt: &Matrix, s: usize, counters: &mut Counters) -> Result<(Matrix, ChecksumPair)> {
    let cp_b = encode_strided(bt, s, counters)?;
    let (c, cp, _) = propagate(a, bt, &cp_b, None, counters)?;
    Ok((c, cp))
}

/// Column-checksum rows `[c1·A; c2·A]` with `c1 = 1`, `c2 = [1..M]`.
pub fn encode_traditional(a: &Matrix, counters: &mut Counters) -> Matrix {
    let mut out = Matrix::zeros(2, a.cols());
    for i in 0..a.rows() {
        let w = (i + 1) as f32;
        for (j, &x) in a.row(i).iter().enumerate() {
            out.data_mut()[j] += x;
            out.data_mut()[a.cols() + j] += w * x;
        }
    }
    counters.flops_checksum += encode_flops(a.rows(), a.cols());
    out
}

/// Verifies `c` against propagated column checks (`2 × cols`) and corrects a
/// single error per column. Two or more errors in one column are reported
/// uncorrectable.
pub fn verify_traditional(
    c: &Matrix,
    checks: &Matrix,
    eps: f32,
    counters: &mut Counters,
) -> Result<(Matrix, VerificationReport)> {
    verify_traditional_at(c, checks, eps, CheckSite::Standalone, counters)
}

pub(crate) fn verify_traditional_at(
    c: &Matrix,
    checks: &Matrix,
    eps: f32,
    site: CheckSite,
    counters: &mut Counters,
) -> Result<(Matrix, VerificationReport)> {
    if checks.rows() != 2 || checks.cols() != c.cols() {
        return Err(Error::shape("traditional checks must be 2 x cols"));
    }
    let sums = encode_traditional(c, &mut Counters::default());
    counters.flops_verify += encode_flops(c.rows(), c.cols());
    let m = c.rows() as f32;
    let mut out = c.clone();
    if !c.is_finite() || !checks.is_finite() || !sums.is_finite() {
        return Ok((out, VerificationReport::with_status(site, Status::NonFinite, f32::INFINITY)));
    }
    let mut residual = 0.0f32;
    let mut first = None;
    let mut fixed = 0;
    let mut uncorrectable = false;
    for j in 0..c.cols() {
        let d1 = checks.get(0, j) - sums.get(0, j);
        let d2 = checks.get(1, j) - sums.get(1, j);
        residual = residual.max(d1.abs()).max(d2.abs() / m);
        if d1.abs() <= eps && d2.abs() <= eps * m {
            continue;
        }
        let rho = if d1 != 0.0 { d2 / d1 } else { f32::NAN };
        let r = rho.round();
        if rho.is_finite() && (rho - r).abs() <= RATIO_TOLERANCE && r >= 1.0 && r <= m {
            let i = r as usize - 1;
            let others: f32 = (0..c.rows()).filter(|&k| k != i).fold(0.0, |a, k| a + out.get(k, j));
            let new = checks.get(0, j) - others;
            let delta = new - out.get(i, j);
            out.data_mut()[i * c.cols() + j] = new;
            first.get_or_insert(((i, j), delta));
            fixed += 1;
        } else {
            uncorrectable = true;
        }
    }
    let rep = match (first, uncorrectable) {
        (_, true) => {
            let mut r = VerificationReport::with_status(site, Status::DetectedUncorrectable, residual);
            r.corrected_cells = fixed;
            r
        }
        (Some((loc, delta)), false) => VerificationReport::corrected(site, Some(loc), delta, residual, fixed),
        (None, false) => VerificationReport::clean(site, residual),
    };
    Ok((out, rep))
}

/// Row checks `[B·r1, B·r2]` (`rows × 2`) of the traditional scheme.
pub fn encode_traditional_rows(b: &Matrix, counters: &mut Counters) -> Matrix {
    encode_traditional(&b.transpose(), counters).transpose()
}

/// Row-checksum counterpart of [`verify_traditional`]; `checks` is `rows × 2`.
pub fn verify_traditional_rows(
    c: &Matrix,
    checks: &Matrix,
    eps: f32,
    counters: &mut Counters,
) -> Result<(Matrix, VerificationReport)> {
    let (out, mut rep) = verify_traditional(&c.transpose(), &checks.transpose(), eps, counters)?;
    rep.location = rep.location.map(|(i, j)| (j, i));
    Ok((out.transpose(), rep))
}

/// Exhaustive two-error correction comparison on a single row.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub width: usize,
    pub stride: usize,
    pub pairs: usize,
    /// Pairs the strided scheme restores exactly.
    pub strided_corrected: usize,
    /// Pairs the traditional row checksum restores exactly.
    pub traditional_corrected: usize,
    /// Pairs where strided correction disagrees with "different checksum columns".
    pub predicate_mismatches: usize,
    /// Single errors restored by each scheme.
    pub strided_singles: usize,
    pub traditional_singles: usize,
    /// Largest simultaneous error count restored in one row.
    pub strided_capacity: usize,
    pub traditional_capacity: usize,
}

impl CoverageReport {
    /// Ratio of correctable single-and-pair patterns, strided over traditional.
    pub fn pattern_ratio(&self) -> f64 {
        (self.strided_singles + self.strided_corrected) as f64
            / (self.traditional_singles + self.traditional_corrected).max(1) as f64
    }

    /// Ratio of per-row simultaneous correction capacity.
    pub fn capacity_ratio(&self) -> f64 {
        self.strided_capacity as f64 / self.traditional_capacity.max(1) as f64
    }
}

/// Enumerates every single error and every unordered pair of errors on a
/// `1 × width` integer row and runs both correctors. Integer data keeps all
/// sums exact, so "corrected" means bit-identical restoration.
pub fn two_error_coverage(width: usize, stride: usize) -> Result<CoverageReport> {
    let groups = strided_groups(width, stride)?;
    let mut c = Counters::default();
    let base = Matrix::from_fn(1, width, StorageClass::Full, |_, j| ((j * 7 + 3) % 11) as f32 - 5.0);
    let cp = strided_raw(&base, stride)?;
    let trad = encode_traditional_rows(&base, &mut c);
    let errs = [1.0f32, 2.0];

    let strided_fix = |t: &Matrix, c: &mut Counters| -> Result<bool> {
        let (out, _) = verify_locate_correct(t, &cp, 0.5, c)?;
        Ok(out.bit_identical(&base))
    };
    let trad_fix = |t: &Matrix, c: &mut Counters| -> Result<bool> {
        let (out, _) = verify_traditional_rows(t, &trad, 0.5, c)?;
        Ok(out.bit_identical(&base))
    };

    let mut rep = CoverageReport {
        width,
        stride,
        pairs: 0,
        strided_corrected: 0,
        traditional_corrected: 0,
        predicate_mismatches: 0,
        strided_singles: 0,
        traditional_singles: 0,
        strided_capacity: 0,
        traditional_capacity: 0,
    };
    for a in 0..width {
        let mut t = base.clone();
        t.data_mut()[a] += errs[0];
        rep.strided_singles += strided_fix(&t, &mut c)? as usize;
        rep.traditional_singles += trad_fix(&t, &mut c)? as usize;
    }
    for a in 0..width {
        for b in a + 1..width {
            let mut t = base.clone();
            t.data_mut()[a] += errs[0];
            t.data_mut()[b] += errs[1];
            rep.pairs += 1;
            let s_ok = strided_fix(&t, &mut c)?;
            rep.strided_corrected += s_ok as usize;
            rep.traditional_corrected += trad_fix(&t, &mut c)? as usize;
            if s_ok != (a % stride != b % stride) {
                rep.predicate_mismatches += 1;
            }
        }
    }
    // Capacity: k errors spread over distinct checksum columns (strided) or
    // anywhere (traditional), k growing until correction fails. Past `stride`
    // errors two must share a checksum column.
    let capacity = |fix: &dyn Fn(&Matrix, &mut Counters) -> Result<bool>, c: &mut Counters| -> Result<usize> {
        let mut best = 0;
        for k in 1..=width {
            let mut t = base.clone();
            for e in 0..k {
                let col = (e % stride) + stride * ((e * 3 + e / stride) % groups);
                t.data_mut()[col] += 1.0 + e as f32;
            }
            if fix(&t, c)? {
                best = k;
            } else {
                break;
            }
        }
        Ok(best)
    };
    rep.strided_capacity = capacity(&strided_fix, &mut c)?;
    rep.traditional_capacity = capacity(&trad_fix, &mut c)?;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{random_half, random_small_ints, seeded_rng};

    fn c() -> Counters {
        Counters::default()
    }

    #[test]
    fn encode_examples() {
        let cp = encode_strided(&Matrix::zeros(2, 16), 8, &mut c()).unwrap();
        assert!(cp.c1.data().iter().chain(cp.c2.data()).all(|&x| x == 0.0));
        assert_eq!((cp.c1.rows(), cp.c1.cols()), (2, 8));

        let cp = encode_strided(&Matrix::filled(1, 16, 1.0), 8, &mut c()).unwrap();
        assert!(cp.c1.data().iter().all(|&x| x == 2.0));
        assert!(cp.c2.data().iter().all(|&x| x == 3.0));

        let mut t = Matrix::zeros(1, 16);
        t.set(0, 5, 7.0);
        let cp = encode_strided(&t, 8, &mut c()).unwrap();
        assert_eq!(cp.c1.get(0, 5), 7.0);
        assert_eq!(cp.c2.get(0, 5), 7.0);
        assert_eq!(cp.c1.data().iter().filter(|&&x| x != 0.0).count(), 1);
    }

    #[test]
    fn encode_and_sums_differ_only_in_accounting() {
        let mut rng = seeded_rng(1);
        let t = random_half(3, 16, &mut rng);
        let mut ce = c();
        let mut cs = c();
        let a = encode_strided(&t, 8, &mut ce).unwrap();
        let b = strided_sums(&t, 8, &mut cs).unwrap();
        assert_eq!(a, b);
        assert_eq!(ce.flops_checksum, cs.flops_verify);
        assert_eq!(ce.flops_verify, 0);
        assert_eq!(cs.flops_checksum, 0);
    }

    #[test]
    fn indivisible_width_rejected() {
        assert!(matches!(encode_strided(&Matrix::zeros(1, 12), 8, &mut c()), Err(Error::Config(_))));
    }

    #[test]
    fn clean_tile_is_clean() {
        let mut rng = seeded_rng(2);
        let t = random_half(4, 16, &mut rng).into_full();
        let cp = encode_strided(&t, 8, &mut c()).unwrap();
        let (out, rep) = verify_locate_correct(&t, &cp, 1e-5, &mut c()).unwrap();
        assert_eq!(rep.status, Status::Clean);
        assert_eq!(rep.delta, 0.0);
        assert!(rep.location.is_none());
        assert!(out.bit_identical(&t));
    }

    #[test]
    fn single_error_located_by_group_ratio() {
        let mut rng = seeded_rng(3);
        let t = random_small_ints(4, 16, 9, &mut rng).into_full();
        let cp = encode_strided(&t, 8, &mut c()).unwrap();
        let mut bad = t.clone();
        bad.set(2, 13, t.get(2, 13) + 1.0);
        let diag = diagnose(&bad, &cp, 0.5, &mut c()).unwrap();
        assert_eq!(diag.violations.len(), 1);
        let v = diag.violations[0];
        assert_eq!((v.row, v.check_col), (2, 5));
        assert_eq!(v.d2 / v.d1, 2.0);
        assert_eq!(v.located, Some(13));
        let (out, rep) = verify_locate_correct(&bad, &cp, 0.5, &mut c()).unwrap();
        assert_eq!(rep.status, Status::Corrected);
        assert_eq!(rep.location, Some((2, 13)));
        assert_eq!(rep.delta, -1.0);
        assert!(out.bit_identical(&t));
    }

    #[test]
    fn aliased_pair_is_uncorrectable() {
        let t = Matrix::zeros(1, 16);
        let cp = encode_strided(&t, 8, &mut c()).unwrap();
        let mut bad = t.clone();
        bad.set(0, 3, 1.0);
        bad.set(0, 11, 1.0);
        let diag = diagnose(&bad, &cp, 0.5, &mut c()).unwrap();
        assert_eq!(diag.violations[0].d1, -2.0);
        assert_eq!(diag.violations[0].d2, -3.0);
        let (_, rep) = verify_locate_correct(&bad, &cp, 0.5, &mut c()).unwrap();
        assert_eq!(rep.status, Status::DetectedUncorrectable);
    }

    #[test]
    fn nonfinite_is_reported_without_correction() {
        let t = Matrix::filled(2, 16, 1.0);
        let cp = encode_strided(&t, 8, &mut c()).unwrap();
        let mut bad = t.clone();
        bad.set(1, 4, f32::NAN);
        let (out, rep) = verify_locate_correct(&bad, &cp, 0.5, &mut c()).unwrap();
        assert_eq!(rep.status, Status::NonFinite);
        assert!(out.get(1, 4).is_nan());
        let mut bad = t.clone();
        bad.set(0, 0, f32::INFINITY);
        let (_, rep) = verify_locate_correct(&bad, &cp, 0.5, &mut c()).unwrap();
        assert_eq!(rep.status, Status::NonFinite);
    }

    #[test]
    fn huge_error_reconstructed_without_cancellation() {
        let mut rng = seeded_rng(4);
        let t = random_half(2, 16, &mut rng).into_full();
        let cp = encode_strided(&t, 8, &mut c()).unwrap();
        let mut bad = t.clone();
        bad.set(1, 9, 1.0e20);
        let (out, rep) = verify_locate_correct(&bad, &cp, 1e-4, &mut c()).unwrap();
        assert_eq!(rep.status, Status::Corrected);
        assert!((out.get(1, 9) - t.get(1, 9)).abs() < 1e-5);
    }

    #[test]
    fn traditional_examples() {
        let mut cn = c();
        let z = Matrix::zeros(4, 4);
        let checks = encode_traditional(&z, &mut cn);
        assert!(checks.data().iter().all(|&x| x == 0.0));
        let (_, rep) = verify_traditional(&z, &checks, 0.5, &mut cn).unwrap();
        assert_eq!(rep.status, Status::Clean);

        let mut rng = seeded_rng(5);
        let a = random_small_ints(4, 4, 5, &mut rng);
        let b = random_small_ints(4, 4, 5, &mut rng);
        let prod = gemm_raw(&a, &b, None).unwrap();
        let checks = gemm_raw(&encode_traditional(&a, &mut cn), &b, None).unwrap();
        let mut bad = prod.clone();
        bad.set(2, 4 - 1, prod.get(2, 3) + 1.0);
        let sums = encode_traditional(&bad, &mut cn);
        let ratio = (checks.get(1, 3) - sums.get(1, 3)) / (checks.get(0, 3) - sums.get(0, 3));
        assert_eq!(ratio, 3.0);
        let (out, rep) = verify_traditional(&bad, &checks, 0.5, &mut cn).unwrap();
        assert_eq!(rep.status, Status::Corrected);
        assert_eq!(rep.location, Some((2, 3)));
        assert!(out.bit_identical(&prod));

        let mut two = prod.clone();
        two.set(0, 1, prod.get(0, 1) + 1.0);
        two.set(3, 1, prod.get(3, 1) + 1.0);
        let (_, rep) = verify_traditional(&two, &checks, 0.5, &mut cn).unwrap();
        assert_ne!(rep.status, Status::Clean);
        assert_ne!(rep.status, Status::Corrected);
    }

    #[test]
    fn traditional_two_errors_brute_force() {
        // Every pair of +1/+2 errors in one 6-row column: never restored.
        let mut cn = c();
        let col = Matrix::from_fn(6, 1, StorageClass::Full, |i, _| i as f32 * 3.0 - 4.0);
        let checks = encode_traditional(&col, &mut cn);
        for a in 0..6 {
            for b in a + 1..6 {
                let mut t = col.clone();
                t.data_mut()[a] += 1.0;
                t.data_mut()[b] += 2.0;
                let (out, _) = verify_traditional(&t, &checks, 0.5, &mut cn).unwrap();
                assert!(!out.bit_identical(&col), "pair ({a},{b}) should not be restorable");
            }
        }
    }

    #[test]
    fn checksummed_gemm_identity_propagation() {
        let mut rng = seeded_rng(6);
        let bt = random_half(8, 16, &mut rng);
        let mut cn = c();
        let (prod, cp) = checksummed_gemm(&Matrix::identity(8), &bt, 8, &mut cn).unwrap();
        let direct = encode_strided(&bt, 8, &mut cn).unwrap();
        assert!(prod.bit_identical(&bt.clone().into_full()));
        assert!(cp.c1.bit_identical(&direct.c1));
        assert!(cp.c2.bit_identical(&direct.c2));
    }

    #[test]
    fn checksummed_gemm_counts_side_band() {
        let mut rng = seeded_rng(7);
        let a = random_half(8, 8, &mut rng);
        let bt = random_half(8, 16, &mut rng);
        let mut cn = c();
        let _ = checksummed_gemm(&a, &bt, 8, &mut cn).unwrap();
        assert_eq!(cn.flops_main, 2 * 8 * 8 * 16);
        assert_eq!(cn.flops_checksum, 2 * 8 * 8 * 16 + encode_flops(8, 16));
    }

    #[test]
    fn coverage_small_case() {
        let rep = two_error_coverage(16, 8).unwrap();
        assert_eq!(rep.pairs, 120);
        assert_eq!(rep.predicate_mismatches, 0);
        assert_eq!(rep.strided_corrected, 120 - 8);
        assert_eq!(rep.traditional_corrected, 0);
        assert_eq!(rep.strided_singles, 16);
        assert_eq!(rep.traditional_singles, 16);
        assert_eq!(rep.strided_capacity, 8);
        assert_eq!(rep.traditional_capacity, 1);
    }
}
