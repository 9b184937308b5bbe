//! Executes a manifest: calibration, per-head campaigns, report files and
//! the terminal summary.

use std::fs;
use std::io::Write;
use std::path::Path;

use efta_core::campaign::{
    calibrate_thresholds, random_inputs, run_campaign, write_summary_json, write_trials_csv, CampaignStats, Summary,
    TrialRecord, SCHEMA_VERSION,
};
use efta_core::kernel::{efta_forward_with, overhead_report, KernelOptions};
use efta_core::tensor::derive_seed;
use efta_core::{Counters, Error, FaultPlan, Result, Thresholds};
use serde::Serialize;

use crate::manifest::{OutputFormat, PlanSource, RunManifest, ThresholdSource};

/// What the campaign produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: Summary,
    pub records: Vec<(usize, TrialRecord)>,
    pub calibrated_from: Option<usize>,
}

impl RunOutcome {
    /// Uncorrectable plus silent outcomes make up more than half of the
    /// faulted trials.
    pub fn failure_dominated(&self) -> bool {
        let s = &self.summary.stats;
        s.faulty_trials > 0 && 2 * (s.uncorrectable + s.silent) > s.faulty_trials
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io { path: path.display().to_string(), message: e.to_string() }
}

fn resolve_thresholds(m: &RunManifest) -> Result<(Thresholds, Option<usize>)> {
    match m.thresholds {
        ThresholdSource::Fixed(t) => Ok((t, None)),
        ThresholdSource::Calibrate { trials, safety } => {
            let cal = calibrate_thresholds(&m.cfg, m.mode, trials, safety, m.dist, derive_seed(m.seed, 0xCA11))?;
            Ok((cal.thresholds, Some(trials)))
        }
    }
}

fn execute_inner(m: &RunManifest) -> Result<RunOutcome> {
    m.validate()?;
    let (thr, calibrated_from) = resolve_thresholds(m)?;
    let gen = m.generator()?;
    let opts = KernelOptions { rowsum: m.rowsum };
    let mut stats = CampaignStats::default();
    let mut records = Vec::new();
    let mut clean_pass = Counters::default();
    for head in 0..m.heads {
        let seed = derive_seed(m.seed, head as u64);
        let (s, recs) = run_campaign(&m.cfg, m.mode, &gen, m.trials, &thr, seed, m.dist, opts)?;
        stats.merge(&s);
        records.extend(recs.into_iter().map(|r| (head, r)));
        let (q, k, v) = random_inputs(&m.cfg, m.dist, seed);
        let (_, rep) = efta_forward_with(&q, &k, &v, &m.cfg, &thr, m.mode, &FaultPlan::empty(), opts)?;
        clean_pass.merge(&rep.counters);
    }
    let oh = overhead_report(&m.cfg, m.mode, &clean_pass);
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        mode: m.mode,
        cfg: m.cfg,
        heads: m.heads,
        seed: m.seed,
        thresholds: thr,
        detection_rate: stats.detection_rate(),
        correction_rate: stats.correction_rate(),
        false_alarm_rate: stats.false_alarm_rate(),
        argmax_preserved: stats.argmax_preserved(),
        residual: stats.residual_summary(),
        checksum_flop_fraction: oh.measured_fraction,
        intermediate_traffic: oh.intermediate_traffic,
        verifications: oh.verifications,
        stats,
    };
    Ok(RunOutcome { summary, records, calibrated_from })
}

/// Runs the campaign on `--jobs` workers.
pub fn execute(m: &RunManifest) -> Result<RunOutcome> {
    match m.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?
            .install(|| execute_inner(m)),
        None => execute_inner(m),
    }
}

#[derive(Serialize)]
struct JsonTrial<'a> {
    head: usize,
    #[serde(flatten)]
    record: &'a TrialRecord,
}

/// Writes `manifest.json`, `summary.json` and `trials.csv` or `trials.json`
/// into `dir`.
pub fn write_outputs(dir: &Path, m: &RunManifest, run: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(m).map_err(|e| io_err(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
    write_summary_json(&dir.join("summary.json"), &run.summary)?;
    match m.format {
        OutputFormat::Csv => write_trials_csv(&dir.join("trials.csv"), &run.records),
        OutputFormat::Json => {
            let path = dir.join("trials.json");
            let rows: Vec<JsonTrial> = run.records.iter().map(|(head, record)| JsonTrial { head: *head, record }).collect();
            let text = serde_json::to_string_pretty(&rows).map_err(|e| io_err(&path, e))?;
            fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
        }
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

/// One screen of results.
pub fn print_summary(out: &mut impl Write, m: &RunManifest, run: &RunOutcome) -> std::io::Result<()> {
    let s = &run.summary;
    let st = &s.stats;
    let c = &s.cfg;
    writeln!(
        out,
        "mode {}  N={} d={} B={} s={}  heads={}  trials={}  seed={}",
        s.mode, c.seq_len, c.head_dim, c.block, c.stride, s.heads, m.trials, s.seed
    )?;
    let source = match run.calibrated_from {
        Some(n) => format!("calibrated on {n} clean runs"),
        None => "fixed".to_string(),
    };
    writeln!(
        out,
        "thresholds       eps1={:.3e} eps2={:.3e} eps_lin={:.3e} ({source})",
        s.thresholds.eps1, s.thresholds.eps2, s.thresholds.eps_lin
    )?;
    let plan = match &m.plan {
        PlanSource::Clean => "none".to_string(),
        PlanSource::Fixed(p) => format!("fixed ({} spec)", p.specs.len()),
        PlanSource::Random { sites, faults } => format!("random, {faults} per call over {} sites", sites.len()),
        PlanSource::File(p) => format!("file {}", p.display()),
    };
    writeln!(out, "faults           {plan}; {} of {} trials faulted", st.faulty_trials, st.trials)?;
    if st.faulty_trials > 0 {
        writeln!(out, "detected         {}", pct(s.detection_rate))?;
        writeln!(
            out,
            "corrected        {}  (masked {}, uncorrectable {}, silent {})",
            pct(s.correction_rate),
            st.masked_benign,
            st.uncorrectable,
            st.silent
        )?;
        writeln!(out, "residual         max {:.3e}  p99 {:.3e}", s.residual.max, s.residual.p99)?;
        writeln!(out, "argmax preserved {}", pct(s.argmax_preserved))?;
    }
    writeln!(out, "false alarms     {} in {} clean runs", st.false_alarms, st.trials)?;
    writeln!(out, "checksum flops   {} of main GEMM flops", pct(s.checksum_flop_fraction))?;
    writeln!(out, "verifications    {} per clean pass", s.verifications)?;
    writeln!(out, "intermediate     {} elements per clean pass", s.intermediate_traffic)?;
    if let Some(dir) = &m.out {
        writeln!(out, "reports          {}", dir.display())?;
    }
    Ok(())
}
