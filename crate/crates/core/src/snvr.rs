//! Value restriction for the softmax stage of the blocked recurrence.
//!
//! * exp stage: the propagated unit checksum of a score tile, shifted by
//!   `G·m`, is the log of the product of the strided `P` elements. The check
//!   runs in the log domain so products of many factors below one never
//!   underflow;
//! * row sum: the normaliser must lie in `[Σ_k e^{b_k - m}, cols]` where
//!   `b_k` are the block maxima. Out-of-range values are replaced by the
//!   lower bound. An exact replay from the per-block history catches
//!   in-range corruption as well;
//! * row max and rescale factor: both are checked against a recomputation
//!   from the history (the max is otherwise self-cancelling).

use serde::{Deserialize, Serialize};

use crate::abft::{diagnose, reconstruct, ChecksumPair};
use crate::counters::Counters;
use crate::error::{Error, Result};
use crate::oracles::row_max;
use crate::report::{CheckSite, Status, VerificationReport};
use crate::tensor::Matrix;

/// Detection thresholds of the protected kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Exp stage, compared in the log domain (a relative bound on products).
    pub eps1: f32,
    /// Output stage, absolute on the normalised output.
    pub eps2: f32,
    /// Score tile, absolute.
    pub eps_lin: f32,
}

impl Thresholds {
    pub fn new(eps1: f32, eps2: f32, eps_lin: f32) -> Result<Self> {
        let t = Thresholds { eps1, eps2, eps_lin };
        t.validate()?;
        Ok(t)
    }

    /// Reference values measured on tensor-core hardware. Desk runs
    /// calibrate instead; these are only documented defaults.
    pub fn gpu_reference() -> Self {
        Thresholds { eps1: 7e-6, eps2: 0.48, eps_lin: 0.48 }
    }

    /// Thresholds that never fire. Used to observe clean discrepancies.
    pub fn unbounded() -> Self {
        Thresholds { eps1: f32::INFINITY, eps2: f32::INFINITY, eps_lin: f32::INFINITY }
    }

    /// Zero is accepted (the degenerate calibration result); negative or
    /// NaN is not.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eps1", self.eps1), ("eps2", self.eps2), ("eps_lin", self.eps_lin)] {
            if v.is_nan() || v < 0.0 {
                return Err(Error::config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Thresholds { eps1: self.eps1 * factor, eps2: self.eps2 * factor, eps_lin: self.eps_lin * factor }
    }
}

/// Per-row history of the blocks processed so far.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowmaxHistory {
    rows: usize,
    /// `block_max[k][r]`: maximum of row `r` within block `k`.
    block_max: Vec<Vec<f32>>,
    /// Rescale factor applied when block `k` was folded in.
    alpha: Vec<Vec<f32>>,
    /// Row sums of the exponentiated block `k`.
    local_sum: Vec<Vec<f32>>,
    /// Running maximum after block `k`.
    running: Vec<Vec<f32>>,
}

impl RowmaxHistory {
    pub fn new(rows: usize) -> Self {
        RowmaxHistory { rows, ..Default::default() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn blocks(&self) -> usize {
        self.block_max.len()
    }

    pub fn push(&mut self, block_max: &[f32], alpha: &[f32], local_sum: &[f32], running: &[f32]) {
        debug_assert!([block_max.len(), alpha.len(), local_sum.len(), running.len()].iter().all(|&l| l == self.rows));
        self.block_max.push(block_max.to_vec());
        self.alpha.push(alpha.to_vec());
        self.local_sum.push(local_sum.to_vec());
        self.running.push(running.to_vec());
    }

    /// Global maximum of row `r`, i.e. the maximum over the block maxima.
    pub fn global_max(&self, r: usize) -> f32 {
        self.block_max.iter().fold(f32::NEG_INFINITY, |a, b| a.max(b[r]))
    }

    /// Latest running maximum of row `r`.
    pub fn running_max(&self, r: usize) -> f32 {
        self.running.last().map_or(f32::NEG_INFINITY, |m| m[r])
    }

    /// `Σ_k e^{b_k - m}` with `m` the global maximum.
    pub fn lower_bound(&self, r: usize) -> f32 {
        let m = self.global_max(r);
        self.block_max.iter().fold(0.0f32, |a, b| a + (b[r] - m).exp())
    }

    /// The normaliser rebuilt from the stored factors and block sums, with
    /// the kernel's exact operation order.
    pub fn replay(&self, r: usize) -> f32 {
        self.alpha.iter().zip(&self.local_sum).fold(0.0f32, |l, (a, s)| a[r] * l + s[r])
    }
}

/// `P = exp(S - m)` row by row.
pub fn exp_tile(s: &Matrix, m: &[f32]) -> Matrix {
    let mut p = s.clone().into_full();
    for (r, &mr) in m.iter().enumerate() {
        p.row_mut(r).iter_mut().for_each(|x| *x = (*x - mr).exp());
    }
    p
}

/// Log-domain exp checksum, `S^{c1} - G·m` per (row, checksum column).
pub fn exp_checksum(cp_s: &ChecksumPair, m: &[f32]) -> Matrix {
    let g = cp_s.groups as f32;
    let mut out = cp_s.c1.clone();
    for (r, &mr) in m.iter().enumerate() {
        out.row_mut(r).iter_mut().for_each(|x| *x -= g * mr);
    }
    out
}

/// Exponentiates a score tile and derives its log-domain checksum.
pub fn exp_with_checksum(s: &Matrix, cp_s: &ChecksumPair, m: &[f32]) -> Result<(Matrix, Matrix)> {
    if m.len() != s.rows() || cp_s.rows() != s.rows() || cp_s.width() != s.cols() {
        return Err(Error::shape("exp checksum inputs disagree in shape"));
    }
    Ok((exp_tile(s, m), exp_checksum(cp_s, m)))
}

/// Result of a log-domain comparison.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExpDiagnosis {
    pub residual: f32,
    /// Rows failing the comparison (including non-finite ones).
    pub bad_rows: Vec<usize>,
    pub nonfinite_rows: Vec<usize>,
}

/// Checks `Σ_l ln P[r][j + s·l]` against the log checksum for one row.
/// Returns `None` for a row that must be recomputed outright.
fn exp_row_residual(p: &[f32], s_row: &[f32], m: f32, log_ck: &[f32], stride: usize) -> Option<f32> {
    if p.iter().any(|&x| !x.is_finite() || !(0.0..=1.0).contains(&x)) || !m.is_finite() {
        return None;
    }
    let groups = p.len() / stride;
    let mut worst = 0.0f32;
    for (j, &ck) in log_ck.iter().enumerate() {
        let lhs = (0..groups).fold(0.0f32, |a, l| a + p[j + stride * l].ln());
        if !ck.is_finite() {
            return None;
        }
        if lhs == f32::NEG_INFINITY {
            // An underflowed factor has no logarithm. Fall back to checking
            // the arguments against the checksum and every factor against
            // a recomputation.
            let mut args = 0.0f32;
            for c in (0..groups).map(|l| j + stride * l) {
                let a = s_row[c] - m;
                if p[c].to_bits() != a.exp().to_bits() {
                    return None;
                }
                args += a;
            }
            worst = worst.max((args - ck).abs());
            continue;
        }
        worst = worst.max((lhs - ck).abs());
    }
    Some(worst)
}

/// Log-domain comparison of `P` against its propagated checksum for every row.
pub fn check_exp_rows(
    p: &Matrix,
    s: &Matrix,
    m: &[f32],
    log_ck: &Matrix,
    stride: usize,
    eps1: f32,
    counters: &mut Counters,
) -> ExpDiagnosis {
    let mut d = ExpDiagnosis::default();
    for (r, &mr) in m.iter().enumerate().take(p.rows()) {
        match exp_row_residual(p.row(r), s.row(r), mr, log_ck.row(r), stride) {
            None => {
                d.nonfinite_rows.push(r);
                d.bad_rows.push(r);
            }
            Some(res) => {
                d.residual = d.residual.max(res);
                if res > eps1 {
                    d.bad_rows.push(r);
                }
            }
        }
    }
    counters.flops_verify += 2 * p.rows() as u64 * p.cols() as u64;
    d
}

/// Recomputes one score element exactly, `(row, col) -> S[row][col]`.
pub type Rescore<'a> = &'a dyn Fn(usize, usize) -> f32;

/// Verifies the exp stage of one tile and repairs it in place.
///
/// On a violation the score tile is re-verified against its linear
/// checksums first. A located score error is repaired, by `rescore` when
/// given (bit-exact) and algebraically otherwise; an unlocatable or
/// non-finite score row is recomputed through `rescore`. Every affected row
/// then gets a fresh running max (`max(m_old, rowmax)`), a fresh exp row and
/// a second log-domain check.
#[allow(clippy::too_many_arguments)]
pub fn verify_exp_stage(
    s: &mut Matrix,
    p: &mut Matrix,
    m_old: &[f32],
    m: &mut [f32],
    cp_s: &ChecksumPair,
    thr: &Thresholds,
    rescore: Option<Rescore<'_>>,
    counters: &mut Counters,
) -> Result<VerificationReport> {
    if p.rows() != s.rows() || p.cols() != s.cols() || m.len() != s.rows() || m_old.len() != s.rows() {
        return Err(Error::shape("exp stage inputs disagree in shape"));
    }
    counters.checks.exp += 1;
    let stride = cp_s.stride;
    let log_ck = exp_checksum(cp_s, m);
    let diag = check_exp_rows(p, s, m, &log_ck, stride, thr.eps1, counters);
    if diag.bad_rows.is_empty() {
        return Ok(VerificationReport::clean(CheckSite::Exp, diag.residual));
    }

    let cols = s.cols();
    let mut rows: Vec<usize> = diag.bad_rows.clone();
    let mut location = None;
    let mut unrepaired = false;
    let lin = diagnose(s, cp_s, thr.eps_lin, counters)?;
    counters.checks.linear += 1;
    let mut redo_rows: Vec<usize> = lin.nonfinite_rows.clone();
    for v in &lin.violations {
        match v.located {
            Some(c) => {
                let fixed = match rescore {
                    Some(f) => f(v.row, c),
                    None => reconstruct(s, cp_s, v.row, c),
                };
                location.get_or_insert((v.row, c));
                s.data_mut()[v.row * cols + c] = fixed;
            }
            None => redo_rows.push(v.row),
        }
        rows.push(v.row);
    }
    redo_rows.sort_unstable();
    redo_rows.dedup();
    for &r in &redo_rows {
        match rescore {
            Some(f) => {
                for c in 0..cols {
                    s.data_mut()[r * cols + c] = f(r, c);
                }
                counters.flops_recompute += 2 * cols as u64 * cp_s.groups as u64;
            }
            None => unrepaired = true,
        }
        rows.push(r);
    }
    rows.sort_unstable();
    rows.dedup();

    for &r in &rows {
        m[r] = m_old[r].max(row_max(s.row(r)));
        let mr = m[r];
        let (srow, prow) = (s.row(r).to_vec(), p.row_mut(r));
        for (pv, sv) in prow.iter_mut().zip(srow) {
            *pv = (sv - mr).exp();
        }
        counters.flops_recompute += cols as u64;
    }
    let log_ck = exp_checksum(cp_s, m);
    let mut residual = 0.0f32;
    for &r in &rows {
        match exp_row_residual(p.row(r), s.row(r), m[r], log_ck.row(r), stride) {
            Some(res) if res <= thr.eps1 => residual = residual.max(res),
            _ => unrepaired = true,
        }
    }
    let residual = diag.residual.max(residual);
    let location = location.or(Some((rows[0], 0)));
    if unrepaired {
        let mut rep = VerificationReport::with_status(CheckSite::Exp, Status::DetectedUncorrectable, residual);
        rep.location = location;
        return Ok(rep);
    }
    Ok(VerificationReport::corrected(CheckSite::Exp, location, 0.0, residual, rows.len()))
}

/// Range restriction of the normaliser against `[Σ_k e^{b_k - m}, cols]`
/// (both ends inclusive). Out-of-range rows get the lower bound.
pub fn restrict_rowsum(l: &mut [f32], hist: &RowmaxHistory, cols: usize) -> VerificationReport {
    let upper = cols as f32;
    let mut first = None;
    let mut replaced = 0;
    let mut residual = 0.0f32;
    for (r, lr) in l.iter_mut().enumerate() {
        let lower = hist.lower_bound(r);
        let ok = lr.is_finite() && *lr >= lower && *lr <= upper;
        if !ok {
            residual = residual.max(if lr.is_finite() { (*lr - lower).abs() } else { f32::INFINITY });
            first.get_or_insert((r, 0, lower - *lr));
            *lr = lower;
            replaced += 1;
        }
    }
    match first {
        None => VerificationReport::clean(CheckSite::RowsumRange, 0.0),
        Some((r, c, delta)) => VerificationReport::corrected(CheckSite::RowsumRange, Some((r, c)), delta, residual, replaced),
    }
}

/// Bitwise replay of the normaliser from the history. Mismatching rows are
/// replaced by the replayed value.
pub fn replay_rowsum(l: &mut [f32], hist: &RowmaxHistory) -> VerificationReport {
    let mut first = None;
    let mut fixed = 0;
    let mut residual = 0.0f32;
    for (r, lr) in l.iter_mut().enumerate() {
        let want = hist.replay(r);
        if want.to_bits() != lr.to_bits() {
            let d = want - *lr;
            residual = residual.max(if d.is_finite() { d.abs() } else { f32::INFINITY });
            first.get_or_insert((r, d));
            *lr = want;
            fixed += 1;
        }
    }
    match first {
        None => VerificationReport::clean(CheckSite::RowsumReplay, 0.0),
        Some((r, d)) => VerificationReport::corrected(CheckSite::RowsumReplay, Some((r, 0)), d, residual, fixed),
    }
}

/// Checks the running max against `max(m_old, block_max)` and restores it.
pub fn guard_running_max(m_new: &mut [f32], m_old: &[f32], block_max: &[f32]) -> VerificationReport {
    let mut first = None;
    let mut fixed = 0;
    for (r, mn) in m_new.iter_mut().enumerate() {
        let want = m_old[r].max(block_max[r]);
        if want.to_bits() != mn.to_bits() {
            first.get_or_insert((r, want - *mn));
            *mn = want;
            fixed += 1;
        }
    }
    match first {
        None => VerificationReport::clean(CheckSite::RowMax, 0.0),
        Some((r, d)) => VerificationReport::corrected(CheckSite::RowMax, Some((r, 0)), d, d.abs(), fixed),
    }
}

/// Checks rescale factors: they must lie in `[0, 1]` (zero only while the
/// previous max is still `-inf` or on underflow) and match `e^{m_old - m_new}`.
pub fn guard_rescale(alpha: &mut [f32], m_old: &[f32], m_new: &[f32]) -> VerificationReport {
    let mut first = None;
    let mut fixed = 0;
    for (r, a) in alpha.iter_mut().enumerate() {
        let want = (m_old[r] - m_new[r]).exp();
        let in_range = *a >= 0.0 && *a <= 1.0;
        if !in_range || want.to_bits() != a.to_bits() {
            first.get_or_insert((r, want - *a));
            *a = want;
            fixed += 1;
        }
    }
    match first {
        None => VerificationReport::clean(CheckSite::Rescale, 0.0),
        Some((r, d)) => VerificationReport::corrected(CheckSite::Rescale, Some((r, 0)), d, d.abs(), fixed),
    }
}

/// Adds `delta[r]` to each running max. Test helper for the shift
/// invariance of the normalised output.
pub fn perturb_rowmax(m: &[f32], delta: &[f32]) -> Vec<f32> {
    m.iter().zip(delta).map(|(a, d)| a + d).collect()
}
