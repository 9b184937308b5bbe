use serde::{Deserialize, Serialize};

/// Main and checksum-column flops of one GEMM family.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmTally {
    pub main: u64,
    pub checksum: u64,
}

impl GemmTally {
    fn merge(&mut self, other: &GemmTally) {
        self.main += other.main;
        self.checksum += other.checksum;
    }
}

/// Number of verification passes executed, by kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckTally {
    /// Strided checksum checks of a score tile.
    pub linear: u64,
    /// Log-domain checks of the exponentiated tile.
    pub exp: u64,
    /// Row-sum range / replay checks.
    pub rowsum: u64,
    /// Checksum checks of the output accumulator.
    pub output: u64,
    /// Running-max and rescale-factor guards.
    pub guard: u64,
    /// DMR comparisons (decoupled baseline).
    pub dmr: u64,
}

impl CheckTally {
    pub fn total(&self) -> u64 {
        self.linear + self.exp + self.rowsum + self.output + self.guard + self.dmr
    }

    pub(crate) fn merge(&mut self, o: &CheckTally) {
        self.linear += o.linear;
        self.exp += o.exp;
        self.rowsum += o.rowsum;
        self.output += o.output;
        self.guard += o.guard;
        self.dmr += o.dmr;
    }
}

/// Per-run work and traffic accumulators.
///
/// `flops_main` counts only multiply-add work of the attention GEMMs; the
/// checksum side-band and verification work are kept apart so overheads are
/// exact integer ratios. Traffic is counted in elements.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub flops_main: u64,
    pub flops_checksum: u64,
    pub flops_verify: u64,
    pub flops_recompute: u64,
    pub hbm_reads: u64,
    pub hbm_writes: u64,
    /// Reads of materialised S/P intermediates.
    pub intermediate_reads: u64,
    /// Writes of materialised S/P intermediates.
    pub intermediate_writes: u64,
    pub gemm1: GemmTally,
    pub gemm2: GemmTally,
    pub checks: CheckTally,
}

impl Counters {
    pub fn reset(&mut self) {
        *self = Counters::default();
    }

    pub fn merge(&mut self, o: &Counters) {
        self.flops_main += o.flops_main;
        self.flops_checksum += o.flops_checksum;
        self.flops_verify += o.flops_verify;
        self.flops_recompute += o.flops_recompute;
        self.hbm_reads += o.hbm_reads;
        self.hbm_writes += o.hbm_writes;
        self.intermediate_reads += o.intermediate_reads;
        self.intermediate_writes += o.intermediate_writes;
        self.gemm1.merge(&o.gemm1);
        self.gemm2.merge(&o.gemm2);
        self.checks.merge(&o.checks);
    }

    /// Intermediate S/P elements moved through memory.
    pub fn intermediate_traffic(&self) -> u64 {
        self.intermediate_reads + self.intermediate_writes
    }
}
