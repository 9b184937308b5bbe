//! Command-line flags and the run manifest they resolve to.

use std::fs;
use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use efta_core::campaign::{InputDist, PlanGenerator, MIN_CALIBRATION_TRIALS};
use efta_core::kernel::RowsumPolicy;
use efta_core::{AttnConfig, Error, FTMode, FaultPlan, FaultSpec, Result, Site, Thresholds};
use serde::{Deserialize, Serialize};

pub const DEFAULT_SEQ_LEN: usize = 256;
pub const DEFAULT_HEAD_DIM: usize = 64;
pub const DEFAULT_BLOCK: usize = 64;
pub const DEFAULT_TRIALS: usize = 100;
pub const DEFAULT_CALIBRATION_TRIALS: usize = 200;
pub const CALIBRATION_SAFETY: f32 = 2.0;

/// Fault-tolerant attention campaigns: runs protected attention heads on
/// seeded random inputs, injects bit flips and reports what the checks
/// caught.
#[derive(Parser, Debug, Default)]
#[command(name = "efta", version, about)]
pub struct Args {
    /// Sequence length N [default: 256]
    #[arg(long)]
    pub seq_len: Option<usize>,

    /// Head dimension d [default: 64]
    #[arg(long)]
    pub head_dim: Option<usize>,

    /// Independent heads per trial [default: 1]
    #[arg(long)]
    pub heads: Option<usize>,

    /// Tile edge B; must divide N [default: 64]
    #[arg(long)]
    pub block: Option<usize>,

    /// Checksum stride s; must divide B and d [default: 8]
    #[arg(long)]
    pub stride: Option<usize>,

    /// none, efta, efta-opt or decoupled [default: efta-opt]
    #[arg(long)]
    pub mode: Option<String>,

    /// Trials per head [default: 100]
    #[arg(long)]
    pub trials: Option<usize>,

    /// Root seed; every random draw derives from it [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,

    /// Calibrate thresholds on N clean runs (the default, with 200 runs,
    /// unless --eps* is given)
    #[arg(long, value_name = "N")]
    pub calibrate: Option<usize>,

    /// SITE:i:j:row:col:bit[:trigger] for one fixed fault, or
    /// random:<SITE,SITE,..|all> for one random fault per call
    #[arg(long, value_name = "SPEC")]
    pub inject: Option<String>,

    /// Fault plan file, one SITE,i,j,row,col,bit[,trigger] per line
    #[arg(long, value_name = "FILE")]
    pub plan: Option<PathBuf>,

    /// Random faults per attention call, each in its own row block [default: 1]
    #[arg(long)]
    pub faults_per_call: Option<usize>,

    /// Exp-stage threshold; unset values fall back to the GPU reference
    #[arg(long, allow_negative_numbers = true)]
    pub eps1: Option<f32>,

    /// Output threshold
    #[arg(long, allow_negative_numbers = true)]
    pub eps2: Option<f32>,

    /// Score-tile threshold
    #[arg(long, allow_negative_numbers = true)]
    pub eps_lin: Option<f32>,

    /// Input distribution [default: normal]
    #[arg(long, value_enum)]
    pub dist: Option<DistArg>,

    /// Row-sum repair policy [default: replay]
    #[arg(long, value_enum)]
    pub rowsum: Option<RowsumArg>,

    /// Directory for manifest.json, summary.json and the trial table
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Trial table format [default: csv]
    #[arg(long, value_enum)]
    pub format: Option<OutputFormat>,

    /// Worker threads [default: all cores]
    #[arg(long)]
    pub jobs: Option<usize>,

    /// Load the run from a manifest; only --out, --jobs and --dump-manifest may accompany it
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,

    /// Print the resolved manifest as JSON and exit
    #[arg(long)]
    pub dump_manifest: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistArg {
    Normal,
    Uniform,
    Zeros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RowsumArg {
    Replay,
    Approximate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    Fixed(Thresholds),
    Calibrate { trials: usize, safety: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSource {
    Clean,
    Fixed(FaultPlan),
    Random { sites: Vec<Site>, faults: usize },
    File(PathBuf),
}

/// Everything a run needs. Serialises to JSON and drives an identical run
/// when loaded back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub cfg: AttnConfig,
    pub heads: usize,
    pub mode: FTMode,
    pub thresholds: ThresholdSource,
    pub plan: PlanSource,
    pub trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub dist: InputDist,
    #[serde(default)]
    pub rowsum: RowsumPolicy,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub format: OutputFormat,
    #[serde(default)]
    pub jobs: Option<usize>,
}

impl RunManifest {
    /// Checks everything that can be checked before computing, including
    /// reading and checking a plan file.
    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        if self.heads == 0 {
            return Err(Error::Config("--heads must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("--trials must be at least 1".into()));
        }
        if self.jobs == Some(0) {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        match self.thresholds {
            ThresholdSource::Fixed(t) => t.validate()?,
            ThresholdSource::Calibrate { trials, safety } => {
                if trials < MIN_CALIBRATION_TRIALS {
                    return Err(Error::Config(format!(
                        "--calibrate needs at least {MIN_CALIBRATION_TRIALS} runs, got {trials}"
                    )));
                }
                if !(safety.is_finite() && safety > 0.0) {
                    return Err(Error::Config(format!("calibration safety must be positive, got {safety}")));
                }
            }
        }
        self.generator()?.plan(&self.cfg, self.seed)?.validate(&self.cfg)
    }

    /// Plan generator for the campaign. Reads the plan file if there is one.
    pub fn generator(&self) -> Result<PlanGenerator> {
        Ok(match &self.plan {
            PlanSource::Clean => PlanGenerator::Clean,
            PlanSource::Fixed(p) => PlanGenerator::Fixed(p.clone()),
            PlanSource::Random { sites, faults } => {
                if sites.is_empty() {
                    return Err(Error::Config("random injection needs at least one site".into()));
                }
                if *faults == 0 {
                    return Err(Error::Config("--faults-per-call must be at least 1".into()));
                }
                PlanGenerator::Random { sites: sites.clone(), faults: *faults }
            }
            PlanSource::File(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Io { path: path.display().to_string(), message: e.to_string() })?;
                PlanGenerator::Fixed(FaultPlan::from_text(&text)?)
            }
        })
    }
}

/// What the process should do.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Run(RunManifest),
    DumpManifest(RunManifest),
}

#[derive(Debug)]
pub enum ArgsError {
    /// Usage error, help or version; clap prints and picks the exit code.
    Clap(clap::Error),
    Invalid(Error),
}

impl From<Error> for ArgsError {
    fn from(e: Error) -> Self {
        ArgsError::Invalid(e)
    }
}

/// `SITE:i:j:row:col:bit[:trigger]` or `random:<sites>`.
pub fn parse_inject(spec: &str, faults: usize) -> Result<PlanSource> {
    if let Some(list) = spec.strip_prefix("random:") {
        let sites = if list.eq_ignore_ascii_case("all") {
            Site::ALL.to_vec()
        } else {
            list.split(',').map(|s| s.trim().parse()).collect::<Result<Vec<Site>>>()?
        };
        return Ok(PlanSource::Random { sites, faults });
    }
    let spec: FaultSpec = spec.replace(':', ",").parse().map_err(|e: Error| match e {
        Error::Plan(m) => Error::Plan(format!("--inject expects SITE:i:j:row:col:bit[:trigger] or random:<sites>; {m}")),
        other => other,
    })?;
    Ok(PlanSource::Fixed(FaultPlan::single(spec)))
}

fn from_flags(a: &Args) -> Result<RunManifest> {
    let cfg = AttnConfig::new(
        a.seq_len.unwrap_or(DEFAULT_SEQ_LEN),
        a.head_dim.unwrap_or(DEFAULT_HEAD_DIM),
        a.block.unwrap_or(DEFAULT_BLOCK),
        a.stride.unwrap_or(AttnConfig::DEFAULT_STRIDE),
    )?;
    let mode = match &a.mode {
        Some(m) => m.parse()?,
        None => FTMode::EftaOptimized,
    };
    let any_eps = a.eps1.is_some() || a.eps2.is_some() || a.eps_lin.is_some();
    let thresholds = match (a.calibrate, any_eps) {
        (Some(_), true) => return Err(Error::Config("--calibrate cannot be combined with --eps1/--eps2/--eps-lin".into())),
        (Some(n), false) => ThresholdSource::Calibrate { trials: n, safety: CALIBRATION_SAFETY },
        (None, false) => ThresholdSource::Calibrate { trials: DEFAULT_CALIBRATION_TRIALS, safety: CALIBRATION_SAFETY },
        (None, true) => {
            let r = Thresholds::gpu_reference();
            ThresholdSource::Fixed(Thresholds::new(
                a.eps1.unwrap_or(r.eps1),
                a.eps2.unwrap_or(r.eps2),
                a.eps_lin.unwrap_or(r.eps_lin),
            )?)
        }
    };
    let faults = a.faults_per_call.unwrap_or(1);
    let plan = match (&a.inject, &a.plan) {
        (Some(_), Some(_)) => return Err(Error::Config("--inject and --plan are mutually exclusive".into())),
        (Some(spec), None) => parse_inject(spec, faults)?,
        (None, Some(path)) => PlanSource::File(path.clone()),
        (None, None) => PlanSource::Clean,
    };
    if a.faults_per_call.is_some() && !matches!(plan, PlanSource::Random { .. }) {
        return Err(Error::Config("--faults-per-call only applies to --inject random:<sites>".into()));
    }
    Ok(RunManifest {
        cfg,
        heads: a.heads.unwrap_or(1),
        mode,
        thresholds,
        plan,
        trials: a.trials.unwrap_or(DEFAULT_TRIALS),
        seed: a.seed.unwrap_or(0),
        dist: match a.dist.unwrap_or(DistArg::Normal) {
            DistArg::Normal => InputDist::Normal,
            DistArg::Uniform => InputDist::Uniform,
            DistArg::Zeros => InputDist::Zeros,
        },
        rowsum: match a.rowsum.unwrap_or(RowsumArg::Replay) {
            RowsumArg::Replay => RowsumPolicy::Replay,
            RowsumArg::Approximate => RowsumPolicy::Approximate,
        },
        out: a.out.clone(),
        format: a.format.unwrap_or_default(),
        jobs: a.jobs,
    })
}

fn from_manifest_file(a: &Args, path: &PathBuf) -> Result<RunManifest> {
    let run_flags = [
        a.seq_len.is_some(),
        a.head_dim.is_some(),
        a.heads.is_some(),
        a.block.is_some(),
        a.stride.is_some(),
        a.mode.is_some(),
        a.trials.is_some(),
        a.seed.is_some(),
        a.calibrate.is_some(),
        a.inject.is_some(),
        a.plan.is_some(),
        a.faults_per_call.is_some(),
        a.eps1.is_some(),
        a.eps2.is_some(),
        a.eps_lin.is_some(),
        a.dist.is_some(),
        a.rowsum.is_some(),
        a.format.is_some(),
    ];
    if run_flags.iter().any(|&f| f) {
        return Err(Error::Config("--manifest only combines with --out, --jobs and --dump-manifest".into()));
    }
    let text =
        fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), message: e.to_string() })?;
    let mut m: RunManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("manifest {}: {e}", path.display())))?;
    if a.out.is_some() {
        m.out = a.out.clone();
    }
    if a.jobs.is_some() {
        m.jobs = a.jobs;
    }
    Ok(m)
}

/// Parses `argv` (program name first) into a validated command.
pub fn parse_args<I, T>(argv: I) -> std::result::Result<Command, ArgsError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = Args::try_parse_from(argv).map_err(ArgsError::Clap)?;
    let manifest = match &args.manifest {
        Some(path) => from_manifest_file(&args, path)?,
        None => from_flags(&args)?,
    };
    manifest.validate()?;
    Ok(if args.dump_manifest { Command::DumpManifest(manifest) } else { Command::Run(manifest) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(line: &str) -> std::result::Result<RunManifest, ArgsError> {
        parse_args(std::iter::once("efta").chain(line.split_whitespace())).map(|c| match c {
            Command::Run(m) | Command::DumpManifest(m) => m,
        })
    }

    fn rejected(line: &str) -> String {
        match parse(line) {
            Err(ArgsError::Invalid(e)) => e.to_string(),
            other => panic!("expected rejection of '{line}', got {other:?}"),
        }
    }

    #[test]
    fn medium_model_setting() {
        let m = parse("--seq-len 512 --head-dim 64 --block 64 --mode efta-opt --trials 100 --seed 7").unwrap();
        assert_eq!((m.cfg.seq_len, m.cfg.head_dim, m.cfg.block, m.cfg.stride), (512, 64, 64, 8));
        assert_eq!(m.mode, FTMode::EftaOptimized);
        assert_eq!((m.trials, m.seed, m.heads), (100, 7, 1));
        assert_eq!(m.plan, PlanSource::Clean);
        assert_eq!(m.thresholds, ThresholdSource::Calibrate { trials: 200, safety: 2.0 });
    }

    #[test]
    fn divisibility_is_enforced() {
        assert!(rejected("--seq-len 100 --block 64").contains("divide"));
    }

    #[test]
    fn fixed_injection() {
        let m = parse("--inject GEMM1_OUT:0:1:3:13:30").unwrap();
        let want = FaultSpec::new(Site::Gemm1Out, 0, 1, 3, 13, 30);
        assert_eq!(m.plan, PlanSource::Fixed(FaultPlan::single(want)));
    }

    #[test]
    fn random_injection() {
        let m = parse("--inject random:GEMM1_OUT,EXP_OUT --faults-per-call 2").unwrap();
        assert_eq!(m.plan, PlanSource::Random { sites: vec![Site::Gemm1Out, Site::ExpOut], faults: 2 });
        let all = parse("--inject random:all").unwrap();
        assert_eq!(all.plan, PlanSource::Random { sites: Site::ALL.to_vec(), faults: 1 });
    }

    #[test]
    fn bad_combinations() {
        rejected("--calibrate 200 --eps2 0.1");
        rejected("--inject GEMM1_OUT:0:9:3:13:30");
        rejected("--inject GEMM1_OUT:0:1:3:13:40");
        rejected("--inject BOGUS:0:1:3:13:30");
        rejected("--inject GEMM1_OUT:0:1");
        rejected("--mode fast");
        rejected("--calibrate 10");
        rejected("--eps1 -1");
        rejected("--faults-per-call 2");
        rejected("--trials 0");
        rejected("--inject random:all --faults-per-call 9 --seq-len 128");
    }

    #[test]
    fn unknown_flags_are_usage_errors() {
        assert!(matches!(parse("--frobnicate"), Err(ArgsError::Clap(_))));
    }

    #[test]
    fn eps_flags_fill_from_reference() {
        let m = parse("--eps2 1e-3").unwrap();
        let r = Thresholds::gpu_reference();
        assert_eq!(m.thresholds, ThresholdSource::Fixed(Thresholds { eps1: r.eps1, eps2: 1e-3, eps_lin: r.eps_lin }));
    }

    #[test]
    fn manifest_json_round_trip() {
        let m = parse("--inject random:all --heads 2 --mode decoupled --eps1 1e-5 --eps2 1e-4 --eps-lin 1e-4").unwrap();
        let text = serde_json::to_string_pretty(&m).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }
}
