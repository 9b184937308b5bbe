//! Batch experiments over the protected kernel: threshold calibration,
//! fault campaigns, threshold sweeps and their file outputs.
//!
//! Every trial draws fresh inputs from its own derived seed and pairs a
//! faulted run with a seed-identical clean run, which is the ground truth.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::AttnConfig;
use crate::error::{Error, Result};
use crate::inject::{sample_random_plan, FaultPlan, Site};
use crate::kernel::{efta_forward_with, FTMode, FTReport, KernelOptions};
use crate::report::CheckSite;
use crate::snvr::Thresholds;
use crate::tensor::{derive_seed, seeded_rng, Matrix, StorageClass};

/// Version of the CSV and JSON layouts written here.
pub const SCHEMA_VERSION: u32 = 1;

/// Smallest calibration run accepted.
pub const MIN_CALIBRATION_TRIALS: usize = 100;

/// Output deviation below which an undetected fault counts as benign: the
/// 16-bit rounding step at the output's scale.
pub fn benign_tolerance(o_clean: &Matrix) -> f32 {
    2f32.powi(-11) * o_clean.max_abs().max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputDist {
    /// Standard normal, rounded to the 16-bit grid.
    #[default]
    Normal,
    /// Uniform on `[-1, 1)`, rounded to the 16-bit grid.
    Uniform,
    Zeros,
}

/// Q, K and V for one trial.
pub fn random_inputs(cfg: &AttnConfig, dist: InputDist, seed: u64) -> (Matrix, Matrix, Matrix) {
    let mut rng = seeded_rng(seed);
    let (n, d) = (cfg.seq_len, cfg.head_dim);
    let mut draw = || {
        Matrix::from_fn(n, d, StorageClass::Half, |_, _| match dist {
            InputDist::Normal => rng.sample::<f32, _>(StandardNormal),
            InputDist::Uniform => rng.random_range(-1.0f32..1.0),
            InputDist::Zeros => 0.0,
        })
    };
    let q = draw();
    let k = draw();
    let v = draw();
    (q, k, v)
}

/// Result of a calibration run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub thresholds: Thresholds,
    /// Largest clean discrepancy per threshold, before the safety factor.
    pub observed: Thresholds,
    pub safety: f32,
    pub trials: usize,
    /// All discrepancies were exactly zero; the thresholds are useless.
    pub degenerate: bool,
}

fn observed_discrepancies(rep: &FTReport, mode: FTMode) -> Thresholds {
    match mode {
        FTMode::Decoupled => Thresholds {
            eps1: rep.max_residual(CheckSite::DmrExp).max(rep.max_residual(CheckSite::DmrRowsum)),
            eps2: rep.max_residual(CheckSite::TraditionalGemm2),
            eps_lin: rep.max_residual(CheckSite::TraditionalGemm1),
        },
        _ => Thresholds {
            eps1: rep.max_residual(CheckSite::Exp),
            eps2: rep.max_residual(CheckSite::OutputIter).max(rep.max_residual(CheckSite::OutputFinal)),
            eps_lin: rep.max_residual(CheckSite::Linear),
        },
    }
}

fn max_thresholds(a: Thresholds, b: Thresholds) -> Thresholds {
    Thresholds { eps1: a.eps1.max(b.eps1), eps2: a.eps2.max(b.eps2), eps_lin: a.eps_lin.max(b.eps_lin) }
}

/// Runs `trials` clean passes with checks that never fire, records the
/// largest discrepancy each check saw and scales it by `safety`.
///
/// The fused modes are calibrated together through the per-iteration
/// variant, which exercises every check.
pub fn calibrate_thresholds(
    cfg: &AttnConfig,
    mode: FTMode,
    trials: usize,
    safety: f32,
    dist: InputDist,
    seed: u64,
) -> Result<Calibration> {
    if trials < MIN_CALIBRATION_TRIALS {
        return Err(Error::Calibration(format!("need at least {MIN_CALIBRATION_TRIALS} trials, got {trials}")));
    }
    if !(safety.is_finite() && safety > 0.0) {
        return Err(Error::Calibration(format!("safety factor must be positive, got {safety}")));
    }
    cfg.validate()?;
    let run_mode = if mode == FTMode::Decoupled { FTMode::Decoupled } else { FTMode::Efta };
    let free = Thresholds::unbounded();
    let per_trial: Vec<Result<Thresholds>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let (q, k, v) = random_inputs(cfg, dist, derive_seed(seed, t as u64));
            let (_, rep) = efta_forward_with(&q, &k, &v, cfg, &free, run_mode, &FaultPlan::empty(), KernelOptions::default())?;
            Ok(observed_discrepancies(&rep, run_mode))
        })
        .collect();
    let mut observed = Thresholds { eps1: 0.0, eps2: 0.0, eps_lin: 0.0 };
    for t in per_trial {
        observed = max_thresholds(observed, t?);
    }
    for (name, v) in [("eps1", observed.eps1), ("eps2", observed.eps2), ("eps_lin", observed.eps_lin)] {
        if !v.is_finite() {
            return Err(Error::Calibration(format!("clean run produced a non-finite {name} discrepancy")));
        }
    }
    let degenerate = observed.eps1 == 0.0 && observed.eps2 == 0.0 && observed.eps_lin == 0.0;
    Ok(Calibration { thresholds: observed.scaled(safety), observed, safety, trials, degenerate })
}

/// Where a trial landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// No fault planned and nothing flagged.
    Clean,
    /// No fault planned but a check fired.
    FalseAlarm,
    /// Detected, corrected, output within eps2 of the clean run.
    Corrected,
    /// Not detected and the output is within the benign tolerance.
    MaskedBenign,
    /// Detected but not repaired to within eps2.
    Uncorrectable,
    /// Not detected and the output is off.
    Silent,
}

/// One trial, as written to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub site: Option<Site>,
    pub bit: Option<u32>,
    pub detected: bool,
    pub corrected: bool,
    /// `|O - O_clean|∞`, infinite when the output is not finite.
    pub residual: f32,
    pub argmax_preserved: bool,
    pub outcome: Outcome,
    /// The clean twin was flagged.
    pub false_alarm: bool,
    /// Output verifications in the faulted run.
    pub output_checks: u64,
}

/// Same argmax in every row.
pub fn argmax_rows_match(a: &Matrix, b: &Matrix) -> bool {
    let argmax = |m: &Matrix, r: usize| {
        m.row(r).iter().enumerate().fold((0, f32::NEG_INFINITY), |best, (c, &x)| if x > best.1 { (c, x) } else { best }).0
    };
    (0..a.rows()).all(|r| argmax(a, r) == argmax(b, r))
}

/// Classifies a faulted run against its clean twin.
pub fn classify(o: &Matrix, rep: &FTReport, o_clean: &Matrix, thr: &Thresholds) -> (Outcome, f32) {
    let residual = o.max_abs_diff(o_clean);
    let residual = if residual.is_nan() { f32::INFINITY } else { residual };
    let detected = rep.detected > 0;
    let outcome = if detected {
        if rep.corrected > 0 && !rep.failed && residual <= thr.eps2 {
            Outcome::Corrected
        } else {
            Outcome::Uncorrectable
        }
    } else if residual <= benign_tolerance(o_clean) {
        Outcome::MaskedBenign
    } else {
        Outcome::Silent
    };
    (outcome, residual)
}

/// Runs one trial: inputs from `seed`, a clean run and, if `plan` is not
/// empty, a faulted run.
#[allow(clippy::too_many_arguments)]
pub fn run_trial(
    cfg: &AttnConfig,
    mode: FTMode,
    thr: &Thresholds,
    dist: InputDist,
    seed: u64,
    plan: &FaultPlan,
    opts: KernelOptions,
) -> Result<TrialRecord> {
    let (q, k, v) = random_inputs(cfg, dist, seed);
    let (o_clean, rep_clean) = efta_forward_with(&q, &k, &v, cfg, thr, mode, &FaultPlan::empty(), opts)?;
    let false_alarm = rep_clean.detected > 0;
    let first = plan.specs.first();
    let mut rec = TrialRecord {
        seed,
        site: first.map(|s| s.site),
        bit: first.map(|s| s.bit),
        detected: false_alarm,
        corrected: false,
        residual: 0.0,
        argmax_preserved: true,
        outcome: if false_alarm { Outcome::FalseAlarm } else { Outcome::Clean },
        false_alarm,
        output_checks: rep_clean.output_checks(),
    };
    if plan.is_empty() {
        return Ok(rec);
    }
    let (o, rep) = efta_forward_with(&q, &k, &v, cfg, thr, mode, plan, opts)?;
    let (outcome, residual) = classify(&o, &rep, &o_clean, thr);
    rec.detected = rep.detected > 0;
    rec.corrected = outcome == Outcome::Corrected;
    rec.residual = residual;
    rec.argmax_preserved = argmax_rows_match(&o, &o_clean);
    rec.outcome = outcome;
    rec.output_checks = rep.output_checks();
    Ok(rec)
}

/// Source of fault plans for a campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PlanGenerator {
    /// Clean trials only.
    Clean,
    /// The same plan every trial.
    Fixed(FaultPlan),
    /// `faults` random bit flips per call over `sites`, each in its own row
    /// block.
    Random { sites: Vec<Site>, faults: usize },
}

impl PlanGenerator {
    pub fn random(sites: &[Site]) -> Self {
        PlanGenerator::Random { sites: sites.to_vec(), faults: 1 }
    }

    pub fn plan(&self, cfg: &AttnConfig, seed: u64) -> Result<FaultPlan> {
        match self {
            PlanGenerator::Clean => Ok(FaultPlan::empty()),
            PlanGenerator::Fixed(p) => Ok(p.clone()),
            PlanGenerator::Random { sites, faults } => {
                let n = cfg.num_blocks();
                if *faults > n {
                    return Err(Error::config(format!("{faults} faults per call exceed the {n} row blocks")));
                }
                let mut plan = FaultPlan { specs: Vec::new(), seed };
                let mut blocks: Vec<usize> = (0..n).collect();
                let mut rng = seeded_rng(derive_seed(seed, 0xB10C));
                for f in 0..*faults {
                    let mut one = sample_random_plan(cfg, sites, derive_seed(seed, f as u64))?;
                    let pick = rng.random_range(f..n);
                    blocks.swap(f, pick);
                    one.specs[0].i = blocks[f];
                    plan.specs.extend(one.specs);
                }
                Ok(plan)
            }
        }
    }
}

/// Distribution summary of output residuals.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub max: f32,
    pub mean: f64,
    pub p50: f32,
    pub p90: f32,
    pub p99: f32,
}

/// Aggregated outcome counts. Merging is associative and commutative.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CampaignStats {
    pub trials: usize,
    /// Trials with a fault planned.
    pub faulty_trials: usize,
    pub detected: usize,
    pub corrected: usize,
    pub masked_benign: usize,
    pub uncorrectable: usize,
    /// Undetected and harmful.
    pub silent: usize,
    /// Clean runs (trials or clean twins) that were flagged.
    pub false_alarms: usize,
    pub argmax_preserved_count: usize,
    pub output_checks: u64,
    /// Sorted residuals of faulted trials.
    #[serde(skip)]
    residuals: Vec<f32>,
}

impl CampaignStats {
    pub fn record(&mut self, r: &TrialRecord) {
        self.trials += 1;
        self.false_alarms += r.false_alarm as usize;
        self.output_checks += r.output_checks;
        if r.site.is_none() {
            return;
        }
        self.faulty_trials += 1;
        self.detected += r.detected as usize;
        match r.outcome {
            Outcome::Corrected => self.corrected += 1,
            Outcome::MaskedBenign => self.masked_benign += 1,
            Outcome::Uncorrectable => self.uncorrectable += 1,
            Outcome::Silent => self.silent += 1,
            Outcome::Clean | Outcome::FalseAlarm => {}
        }
        self.argmax_preserved_count += r.argmax_preserved as usize;
        let at = self.residuals.partition_point(|x| x.total_cmp(&r.residual).is_lt());
        self.residuals.insert(at, r.residual);
    }

    pub fn merge(&mut self, o: &CampaignStats) {
        self.trials += o.trials;
        self.faulty_trials += o.faulty_trials;
        self.detected += o.detected;
        self.corrected += o.corrected;
        self.masked_benign += o.masked_benign;
        self.uncorrectable += o.uncorrectable;
        self.silent += o.silent;
        self.false_alarms += o.false_alarms;
        self.argmax_preserved_count += o.argmax_preserved_count;
        self.output_checks += o.output_checks;
        self.residuals.extend_from_slice(&o.residuals);
        self.residuals.sort_by(f32::total_cmp);
    }

    fn frac(a: usize, b: usize) -> f64 {
        if b == 0 {
            0.0
        } else {
            a as f64 / b as f64
        }
    }

    pub fn detection_rate(&self) -> f64 {
        Self::frac(self.detected, self.faulty_trials)
    }

    pub fn correction_rate(&self) -> f64 {
        Self::frac(self.corrected, self.faulty_trials)
    }

    /// False alarms per clean run. Every trial has one.
    pub fn false_alarm_rate(&self) -> f64 {
        Self::frac(self.false_alarms, self.trials)
    }

    pub fn argmax_preserved(&self) -> f64 {
        if self.faulty_trials == 0 {
            1.0
        } else {
            Self::frac(self.argmax_preserved_count, self.faulty_trials)
        }
    }

    pub fn residual_summary(&self) -> ResidualSummary {
        let r = &self.residuals;
        if r.is_empty() {
            return ResidualSummary::default();
        }
        let pick = |p: f64| r[((r.len() - 1) as f64 * p).round() as usize];
        ResidualSummary {
            max: r[r.len() - 1],
            mean: r.iter().map(|&x| x as f64).sum::<f64>() / r.len() as f64,
            p50: pick(0.5),
            p90: pick(0.9),
            p99: pick(0.99),
        }
    }
}

/// Runs `trials` independent trials in parallel. Results depend only on the
/// arguments, not on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn run_campaign(
    cfg: &AttnConfig,
    mode: FTMode,
    gen: &PlanGenerator,
    trials: usize,
    thr: &Thresholds,
    seed: u64,
    dist: InputDist,
    opts: KernelOptions,
) -> Result<(CampaignStats, Vec<TrialRecord>)> {
    cfg.validate()?;
    thr.validate()?;
    let records: Vec<TrialRecord> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let tseed = derive_seed(seed, t as u64);
            let plan = gen.plan(cfg, derive_seed(tseed, 0xFA17))?;
            run_trial(cfg, mode, thr, dist, tseed, &plan, opts)
        })
        .collect::<Result<_>>()?;
    let mut stats = CampaignStats::default();
    for r in &records {
        stats.record(r);
    }
    Ok((stats, records))
}

/// One point of a threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub factor: f32,
    pub thresholds: Thresholds,
    pub detection_rate: f64,
    pub false_alarm_rate: f64,
}

/// Ten log-spaced multipliers from 1e-2 to 1e7.
pub fn default_sweep_factors() -> Vec<f32> {
    (0..10).map(|k| 10f32.powi(k - 2)).collect()
}

/// Scales `base` by each factor and measures detection over faulted trials
/// and false alarms over clean runs, on identical seeds at every point.
#[allow(clippy::too_many_arguments)]
pub fn threshold_sweep(
    cfg: &AttnConfig,
    mode: FTMode,
    base: &Thresholds,
    factors: &[f32],
    sites: &[Site],
    trials: usize,
    seed: u64,
    dist: InputDist,
) -> Result<Vec<SweepPoint>> {
    let gen = PlanGenerator::random(sites);
    factors
        .iter()
        .map(|&f| {
            let thr = base.scaled(f);
            let (stats, _) = run_campaign(cfg, mode, &gen, trials, &thr, seed, dist, KernelOptions::default())?;
            Ok(SweepPoint {
                factor: f,
                thresholds: thr,
                detection_rate: stats.detection_rate(),
                false_alarm_rate: stats.false_alarm_rate(),
            })
        })
        .collect()
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io { path: path.display().to_string(), message: e.to_string() }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    seed: u64,
    site: &'a str,
    bit: Option<u32>,
    detected: bool,
    corrected: bool,
    residual: f32,
    argmax_preserved: bool,
    outcome: Outcome,
    head: usize,
}

/// Writes one CSV row per trial: `seed, site, bit, detected, corrected,
/// residual, argmax_preserved, outcome, head`. Clean trials leave `site`
/// and `bit` empty.
pub fn write_trials_csv(path: &Path, records: &[(usize, TrialRecord)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for (head, r) in records {
        let site = r.site.map(Site::name).unwrap_or("");
        w.serialize(CsvRow {
            seed: r.seed,
            site,
            bit: r.bit,
            detected: r.detected,
            corrected: r.corrected,
            residual: r.residual,
            argmax_preserved: r.argmax_preserved,
            outcome: r.outcome,
            head: *head,
        })
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// JSON summary of a campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub mode: FTMode,
    pub cfg: AttnConfig,
    pub heads: usize,
    pub seed: u64,
    pub thresholds: Thresholds,
    pub stats: CampaignStats,
    pub detection_rate: f64,
    pub correction_rate: f64,
    pub false_alarm_rate: f64,
    pub argmax_preserved: f64,
    pub residual: ResidualSummary,
    /// Checksum plus verification flops over main flops, one clean pass.
    pub checksum_flop_fraction: f64,
    /// S/P elements moved through memory per clean pass, all heads.
    pub intermediate_traffic: u64,
    /// Verification passes per clean pass, all heads.
    pub verifications: u64,
}

pub fn write_summary_json(path: &Path, summary: &Summary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).map_err(|e| io_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}
