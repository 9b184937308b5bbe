use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Clean,
    Corrected,
    DetectedUncorrectable,
    NonFinite,
}

impl Status {
    pub fn is_detection(self) -> bool {
        !matches!(self, Status::Clean)
    }
}

/// Which check produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CheckSite {
    /// Strided checksum of a score tile (GEMM I).
    Linear,
    /// Log-domain checksum of the exponentiated tile.
    Exp,
    /// Running-max consistency against the block-max history.
    RowMax,
    /// Rescale factor range and recomputation guard.
    Rescale,
    /// Row-sum range restriction.
    RowsumRange,
    /// Row-sum replay from the per-block history.
    RowsumReplay,
    /// Accumulator checksum inside the block loop.
    OutputIter,
    /// Normalised output checksum after the block loop.
    OutputFinal,
    /// Traditional column-checksum ABFT on a score tile.
    TraditionalGemm1,
    /// Traditional column-checksum ABFT on an output tile.
    TraditionalGemm2,
    /// DMR of the exponentials (decoupled softmax).
    DmrExp,
    /// Normalised row-sum check (decoupled softmax).
    DmrRowsum,
    /// Standalone checksum verification outside a kernel.
    Standalone,
}

/// Outcome of a single verification pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub status: Status,
    pub site: CheckSite,
    /// First corrected or offending cell, if any.
    pub location: Option<(usize, usize)>,
    /// Correction applied at `location`.
    pub delta: f32,
    /// Largest checksum discrepancy observed.
    pub residual: f32,
    /// Number of cells (or rows) repaired by this pass.
    pub corrected_cells: usize,
}

impl VerificationReport {
    pub fn clean(site: CheckSite, residual: f32) -> Self {
        VerificationReport { status: Status::Clean, site, location: None, delta: 0.0, residual, corrected_cells: 0 }
    }

    pub fn with_status(site: CheckSite, status: Status, residual: f32) -> Self {
        VerificationReport { status, site, location: None, delta: 0.0, residual, corrected_cells: 0 }
    }

    pub fn corrected(site: CheckSite, location: Option<(usize, usize)>, delta: f32, residual: f32, cells: usize) -> Self {
        VerificationReport { status: Status::Corrected, site, location, delta, residual, corrected_cells: cells }
    }
}
