//! Bit-flip fault injection at pipeline site boundaries.
//!
//! A fault corrupts a computed value right after the operation producing
//! it. Every site evaluation is counted per `(site, i, j)`; a spec fires on
//! its `trigger`-th evaluation, so recomputation after a detection never
//! re-fires the same fault.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::AttnConfig;
use crate::error::{Error, Result};
use crate::tensor::{from_half_bits, half_bits, seeded_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Site {
    /// Score tile after GEMM I and scaling.
    Gemm1Out,
    /// Exp argument `S - m`.
    SubMax,
    /// Exponentiated tile `P`.
    ExpOut,
    /// Running row maximum (per row).
    ReduceMax,
    /// Running row sum (per row).
    ReduceSum,
    /// Rescale factor `e^{m_old - m_new}` (per row).
    RescaleFactor,
    /// Output accumulator after GEMM II.
    Gemm2Acc,
    /// Output after the final division.
    NormalizeOut,
}

impl Site {
    pub const ALL: [Site; 8] = [
        Site::Gemm1Out,
        Site::SubMax,
        Site::ExpOut,
        Site::ReduceMax,
        Site::ReduceSum,
        Site::RescaleFactor,
        Site::Gemm2Acc,
        Site::NormalizeOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Site::Gemm1Out => "GEMM1_OUT",
            Site::SubMax => "SUB_MAX",
            Site::ExpOut => "EXP_OUT",
            Site::ReduceMax => "REDUCE_MAX",
            Site::ReduceSum => "REDUCE_SUM",
            Site::RescaleFactor => "RESCALE_FACTOR",
            Site::Gemm2Acc => "GEMM2_ACC",
            Site::NormalizeOut => "NORMALIZE_OUT",
        }
    }

    /// Storage width of the values at this site. Every site carries 32-bit
    /// values in this kernel.
    pub fn width(self) -> u32 {
        32
    }

    /// Per-row scalar sites ignore the column coordinate.
    pub fn is_per_row(self) -> bool {
        matches!(self, Site::ReduceMax | Site::ReduceSum | Site::RescaleFactor)
    }

    /// Column extent of the value addressed at this site.
    pub fn cols(self, cfg: &AttnConfig) -> usize {
        match self {
            Site::Gemm1Out | Site::SubMax | Site::ExpOut => cfg.block,
            Site::Gemm2Acc | Site::NormalizeOut => cfg.head_dim,
            _ => 1,
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase().replace('-', "_");
        Site::ALL
            .into_iter()
            .find(|x| x.name() == up)
            .ok_or_else(|| Error::plan(format!("unknown site '{s}'")))
    }
}

/// Flips `bit` of `x` viewed at `width` bits. At width 16 the value is
/// first rounded to the 16-bit grid.
pub fn flip_bit(x: f32, width: u32, bit: u32) -> Result<f32> {
    if bit >= width {
        return Err(Error::plan(format!("bit {bit} out of range for a {width}-bit value")));
    }
    match width {
        32 => Ok(f32::from_bits(x.to_bits() ^ (1 << bit))),
        16 => Ok(from_half_bits(half_bits(x) ^ (1 << bit))),
        _ => Err(Error::plan(format!("unsupported width {width}"))),
    }
}

/// One planned bit flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub site: Site,
    /// Row block.
    pub i: usize,
    /// Column block.
    pub j: usize,
    pub row: usize,
    pub col: usize,
    pub bit: u32,
    /// Fire on this evaluation of `(site, i, j)`, counting from 1.
    pub trigger: u32,
}

impl FaultSpec {
    pub fn new(site: Site, i: usize, j: usize, row: usize, col: usize, bit: u32) -> Self {
        FaultSpec { site, i, j, row, col, bit, trigger: 1 }
    }

    pub fn validate(&self, cfg: &AttnConfig) -> Result<()> {
        let n = cfg.num_blocks();
        if self.i >= n || self.j >= n {
            return Err(Error::plan(format!("block ({}, {}) outside the {n}x{n} grid", self.i, self.j)));
        }
        if self.row >= cfg.block || self.col >= self.site.cols(cfg) {
            return Err(Error::plan(format!(
                "cell ({}, {}) outside the {}x{} {} tile",
                self.row,
                self.col,
                cfg.block,
                self.site.cols(cfg),
                self.site
            )));
        }
        if self.bit >= self.site.width() {
            return Err(Error::plan(format!("bit {} out of range for {}", self.bit, self.site)));
        }
        if self.trigger == 0 {
            return Err(Error::plan("trigger counts start at 1"));
        }
        Ok(())
    }
}

impl fmt::Display for FaultSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{},{},{}", self.site, self.i, self.j, self.row, self.col, self.bit, self.trigger)
    }
}

impl FromStr for FaultSpec {
    type Err = Error;

    /// `SITE,i,j,row,col,bit[,trigger]`
    fn from_str(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 6 && parts.len() != 7 {
            return Err(Error::plan(format!("expected 6 or 7 fields, got {}: '{line}'", parts.len())));
        }
        let num = |k: usize| -> Result<usize> {
            parts[k].parse().map_err(|_| Error::plan(format!("field {} is not a count: '{}'", k + 1, parts[k])))
        };
        Ok(FaultSpec {
            site: parts[0].parse()?,
            i: num(1)?,
            j: num(2)?,
            row: num(3)?,
            col: num(4)?,
            bit: num(5)? as u32,
            trigger: if parts.len() == 7 { num(6)? as u32 } else { 1 },
        })
    }
}

/// Ordered fault specs plus the seed they were drawn from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub specs: Vec<FaultSpec>,
    pub seed: u64,
}

impl FaultPlan {
    pub fn empty() -> Self {
        FaultPlan::default()
    }

    pub fn single(spec: FaultSpec) -> Self {
        FaultPlan { specs: vec![spec], seed: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Range checks every spec and enforces at most one fault per
    /// detection cycle. A cycle is one row block: every check on block `i`
    /// completes before block `i + 1` starts.
    pub fn validate(&self, cfg: &AttnConfig) -> Result<()> {
        let mut seen = HashMap::new();
        for s in &self.specs {
            s.validate(cfg)?;
            if let Some(prev) = seen.insert(s.i, *s) {
                return Err(Error::plan(format!(
                    "'{prev}' and '{s}' fall in the same detection cycle (row block {})",
                    s.i
                )));
            }
        }
        Ok(())
    }

    /// One spec per line, preceded by a seed comment.
    pub fn to_text(&self) -> String {
        let mut out = format!("# seed={}\n", self.seed);
        for s in &self.specs {
            out.push_str(&s.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut plan = FaultPlan::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(c) = line.strip_prefix('#') {
                if let Some(v) = c.trim().strip_prefix("seed=") {
                    plan.seed = v.trim().parse().map_err(|_| Error::plan(format!("bad seed '{v}'")))?;
                }
                continue;
            }
            plan.specs.push(line.parse()?);
        }
        Ok(plan)
    }
}

/// Draws one fault uniformly over the allowed sites, the block grid, the
/// tile cells and the bit positions.
pub fn sample_random_plan(cfg: &AttnConfig, sites: &[Site], seed: u64) -> Result<FaultPlan> {
    if sites.is_empty() {
        return Err(Error::config("random plan needs at least one site"));
    }
    let mut rng = seeded_rng(seed);
    let site = sites[rng.random_range(0..sites.len())];
    let n = cfg.num_blocks();
    let i = rng.random_range(0..n);
    let j = if site == Site::NormalizeOut { n - 1 } else { rng.random_range(0..n) };
    let row = rng.random_range(0..cfg.block);
    let col = rng.random_range(0..site.cols(cfg));
    let bit = rng.random_range(0..site.width());
    Ok(FaultPlan { specs: vec![FaultSpec::new(site, i, j, row, col, bit)], seed })
}

/// A flip that fires now, in tile coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Firing {
    pub row: usize,
    pub col: usize,
    pub bit: u32,
}

/// Executes a plan against one run.
#[derive(Debug, Clone, Default)]
pub struct Injector {
    specs: Vec<FaultSpec>,
    evaluations: HashMap<(Site, usize, usize), u32>,
    fired: Vec<FaultSpec>,
}

impl Injector {
    pub fn new(plan: &FaultPlan) -> Self {
        Injector { specs: plan.specs.clone(), ..Default::default() }
    }

    pub fn inactive() -> Self {
        Injector::default()
    }

    /// Records one evaluation of `(site, i, j)` and returns the flips due.
    pub fn fire(&mut self, site: Site, i: usize, j: usize) -> Vec<Firing> {
        if self.specs.is_empty() {
            return Vec::new();
        }
        let n = self.evaluations.entry((site, i, j)).or_insert(0);
        *n += 1;
        let count = *n;
        let due: Vec<FaultSpec> = self
            .specs
            .iter()
            .filter(|s| s.site == site && s.i == i && s.j == j && s.trigger == count)
            .copied()
            .collect();
        self.fired.extend(&due);
        due.into_iter().map(|s| Firing { row: s.row, col: s.col, bit: s.bit }).collect()
    }

    /// Evaluates a site over a row-major tile with `cols` columns.
    pub fn apply_tile(&mut self, site: Site, i: usize, j: usize, data: &mut [f32], cols: usize) {
        for f in self.fire(site, i, j) {
            let k = f.row * cols + f.col;
            data[k] = flip_bit(data[k], site.width(), f.bit).expect("validated bit");
        }
    }

    /// Evaluates a per-row scalar site.
    pub fn apply_rows(&mut self, site: Site, i: usize, j: usize, values: &mut [f32]) {
        for f in self.fire(site, i, j) {
            values[f.row] = flip_bit(values[f.row], site.width(), f.bit).expect("validated bit");
        }
    }

    /// Specs that have fired so far.
    pub fn fired(&self) -> &[FaultSpec] {
        &self.fired
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AttnConfig {
        AttnConfig::new(64, 16, 16, 8).unwrap()
    }


    #[test]
    fn serde_names_match_text_names() {
        for site in Site::ALL {
            assert_eq!(serde_json::to_string(&site).unwrap(), format!("\"{}\"", site.name()));
        }
    }
    #[test]
    fn flip_examples() {
        assert_eq!(flip_bit(1.0, 32, 31).unwrap(), -1.0);
        let x = 0.3712f32;
        assert_eq!(flip_bit(flip_bit(x, 32, 17).unwrap(), 32, 17).unwrap().to_bits(), x.to_bits());
        // 1.0 = 0x3F80_0000; bit 30 set gives exponent 0xFF, i.e. infinity.
        let y = flip_bit(1.0, 32, 30).unwrap();
        assert_eq!(y.to_bits(), 0x3F80_0000 | (1 << 30));
        assert!(y.is_infinite());
        // 0.5 = 0x3F00_0000; bit 30 set gives exponent 0xFE: 2^127.
        assert_eq!(flip_bit(0.5, 32, 30).unwrap(), 2f32.powi(127));
        assert!(flip_bit(1.0, 32, 32).is_err());
    }

    #[test]
    fn flip_half_width() {
        assert_eq!(flip_bit(1.0, 16, 15).unwrap(), -1.0);
        // 1.0 = 0x3C00; bit 14 set gives 0x7C00 = +inf.
        assert!(flip_bit(1.0, 16, 14).unwrap().is_infinite());
        // bit 9 is the top mantissa bit: 1.5.
        assert_eq!(flip_bit(1.0, 16, 9).unwrap(), 1.5);
        assert!(flip_bit(1.0, 16, 16).is_err());
    }

    #[test]
    fn spec_text_round_trip() {
        let plan = FaultPlan {
            specs: vec![
                FaultSpec::new(Site::Gemm1Out, 0, 1, 3, 13, 30),
                FaultSpec { trigger: 2, ..FaultSpec::new(Site::ReduceSum, 2, 3, 7, 0, 22) },
            ],
            seed: 99,
        };
        let text = plan.to_text();
        assert!(text.contains("GEMM1_OUT,0,1,3,13,30,1"));
        assert_eq!(FaultPlan::from_text(&text).unwrap(), plan);
        assert!(FaultPlan::from_text("NOPE,0,0,0,0,0").is_err());
        assert!(FaultPlan::from_text("GEMM1_OUT,0,0,0").is_err());
    }

    #[test]
    fn validation_rejects_out_of_range_and_two_faults_per_cycle() {
        let c = cfg();
        assert!(FaultPlan::single(FaultSpec::new(Site::Gemm1Out, 0, 1, 3, 13, 30)).validate(&c).is_ok());
        assert!(FaultPlan::single(FaultSpec::new(Site::Gemm1Out, 4, 0, 0, 0, 0)).validate(&c).is_err());
        assert!(FaultPlan::single(FaultSpec::new(Site::Gemm1Out, 0, 0, 0, 16, 0)).validate(&c).is_err());
        assert!(FaultPlan::single(FaultSpec::new(Site::ExpOut, 0, 0, 0, 0, 32)).validate(&c).is_err());
        assert!(FaultPlan::single(FaultSpec::new(Site::ReduceMax, 0, 0, 0, 1, 3)).validate(&c).is_err());
        let two = FaultPlan {
            specs: vec![FaultSpec::new(Site::Gemm1Out, 1, 0, 0, 0, 3), FaultSpec::new(Site::ExpOut, 1, 2, 0, 0, 3)],
            seed: 0,
        };
        assert!(matches!(two.validate(&c), Err(Error::Plan(_))));
        let apart = FaultPlan {
            specs: vec![FaultSpec::new(Site::Gemm1Out, 1, 0, 0, 0, 3), FaultSpec::new(Site::ExpOut, 2, 2, 0, 0, 3)],
            seed: 0,
        };
        assert!(apart.validate(&c).is_ok());
    }

    #[test]
    fn sampling_is_deterministic_and_checked() {
        let c = cfg();
        let a = sample_random_plan(&c, &Site::ALL, 5).unwrap();
        assert_eq!(a, sample_random_plan(&c, &Site::ALL, 5).unwrap());
        a.validate(&c).unwrap();
        assert!(matches!(sample_random_plan(&c, &[], 5), Err(Error::Config(_))));
    }

    #[test]
    fn site_frequencies_are_uniform() {
        let c = cfg();
        let n = 10_000;
        let mut counts = HashMap::new();
        for seed in 0..n {
            let p = sample_random_plan(&c, &Site::ALL, seed).unwrap();
            p.validate(&c).unwrap();
            *counts.entry(p.specs[0].site).or_insert(0u32) += 1;
        }
        let k = Site::ALL.len() as f64;
        let expect = n as f64 / k;
        let sigma = (n as f64 * (1.0 / k) * (1.0 - 1.0 / k)).sqrt();
        let mut chi2 = 0.0;
        for s in Site::ALL {
            let got = counts[&s] as f64;
            assert!((got - expect).abs() <= 3.0 * sigma, "{s}: {got}");
            chi2 += (got - expect).powi(2) / expect;
        }
        // 7 degrees of freedom, 99.9th percentile.
        assert!(chi2 < 24.32, "chi2 = {chi2}");
    }

    #[test]
    fn injector_fires_on_trigger_only() {
        let plan = FaultPlan {
            specs: vec![FaultSpec { trigger: 2, ..FaultSpec::new(Site::ExpOut, 0, 1, 0, 1, 31) }],
            seed: 0,
        };
        let mut inj = Injector::new(&plan);
        let mut tile = vec![0.5f32; 4];
        inj.apply_tile(Site::ExpOut, 0, 1, &mut tile, 2);
        assert_eq!(tile, vec![0.5; 4]);
        inj.apply_tile(Site::ExpOut, 0, 0, &mut tile, 2);
        inj.apply_tile(Site::ExpOut, 0, 1, &mut tile, 2);
        assert_eq!(tile, vec![0.5, -0.5, 0.5, 0.5]);
        inj.apply_tile(Site::ExpOut, 0, 1, &mut tile, 2);
        assert_eq!(tile, vec![0.5, -0.5, 0.5, 0.5]);
        assert_eq!(inj.fired().len(), 1);
    }
}
