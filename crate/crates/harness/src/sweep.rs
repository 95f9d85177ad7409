//! Cross product of one config axis with repeated seeds; cells run in parallel.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::experiment::{execute, fmt, write_run};
use crate::output::write_atomic;

pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rank,
    Gamma,
    Interval,
}

impl FromStr for Axis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(Self::Rank),
            "gamma" => Ok(Self::Gamma),
            "interval" => Ok(Self::Interval),
            other => Err(HarnessError::Config(format!("unknown sweep axis `{other}` (rank | gamma | interval)"))),
        }
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rank => "rank",
            Self::Gamma => "gamma",
            Self::Interval => "interval",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(HarnessError::Config(format!("{} must be a positive integer, got {value}", self.name())))
            }
        };
        match self {
            Self::Rank => cfg.rank = count()?,
            Self::Interval => cfg.interval = count()?,
            Self::Gamma => cfg.gamma = value,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `"2,4,8"`.
pub fn parse_values(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| HarnessError::Config(format!("bad sweep value `{v}`"))))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub value: f64,
    pub runs: usize,
    pub failures: usize,
    /// Mean and sample standard deviation of the final eval metric over successful runs.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub axis: Axis,
    pub cells: Vec<CellSummary>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,value,runs,failures,mean_eval,std_eval\n");
        let opt = |x: Option<f64>| x.map(fmt).unwrap_or_default();
        for c in &self.cells {
            writeln!(out, "{},{},{},{},{},{}", self.axis.name(), c.value, c.runs, c.failures, opt(c.mean), opt(c.std)).unwrap();
        }
        out
    }
}

/// Seed `i` of a cell is `base.seed + i`.
pub fn cell_dir(base: &ExperimentConfig, axis: Axis, value: f64, seed: u64) -> PathBuf {
    base.output_dir.join(format!("{}-{value}", axis.name())).join(format!("seed-{seed}"))
}

/// Runs every `(value, seed)` pair, writes each run directory and `summary.csv` under
/// `base.output_dir`. Failed runs are counted per cell and do not stop the sweep.
pub fn run_sweep(base: &ExperimentConfig, axis: Axis, values: &[f64], seeds: usize) -> Result<SweepResult> {
    if values.is_empty() || seeds == 0 {
        return Err(HarnessError::Config("sweep needs at least one value and one seed".into()));
    }
    let mut values = values.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let jobs: Vec<(f64, u64, ExperimentConfig)> = values
        .iter()
        .flat_map(|&v| (0..seeds as u64).map(move |i| (v, i)))
        .map(|(v, i)| {
            let seed = base.seed + i;
            let mut cfg = axis.apply(base, v)?;
            cfg.seed = seed;
            cfg.output_dir = cell_dir(base, axis, v, seed);
            Ok((v, seed, cfg))
        })
        .collect::<Result<_>>()?;

    let outcomes: Vec<(f64, std::result::Result<f64, String>)> = jobs
        .par_iter()
        .map(|(v, _, cfg)| {
            let result = execute(cfg).map_err(|e| e.to_string()).and_then(|out| {
                write_run(cfg, &out, &cfg.output_dir).map_err(|e| e.to_string())?;
                match (&out.failure, out.final_eval()) {
                    (None, Some(m)) => Ok(m),
                    (Some(msg), _) => Err(msg.clone()),
                    (None, None) => Err("no evaluation recorded".into()),
                }
            });
            (*v, result)
        })
        .collect();

    let cells = values
        .iter()
        .map(|&value| {
            let mut ok = Vec::new();
            let mut errors = Vec::new();
            for (_, r) in outcomes.iter().filter(|(v, _)| *v == value) {
                match r {
                    Ok(m) => ok.push(*m),
                    Err(e) => errors.push(e.clone()),
                }
            }
            let (mean, std) = mean_std(&ok);
            CellSummary { value, runs: seeds, failures: errors.len(), mean, std, errors }
        })
        .collect();
    let result = SweepResult { axis, cells };
    std::fs::create_dir_all(&base.output_dir).map_err(|e| HarnessError::io(&base.output_dir, e))?;
    write_atomic(&base.output_dir.join(SUMMARY_FILE), result.to_csv().as_bytes())?;
    Ok(result)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (Some(mean), Some(var.sqrt()))
}
