//! Drift summaries from metrics files: the per-step mean drift series, the length of the
//! initial transient and the steady-state level after it.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::experiment::METRICS_FILE;

/// Relative change between consecutive window means below which the series counts as settled.
pub const SETTLE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftSummary {
    pub source: String,
    pub steps: Vec<usize>,
    pub mean_drift: Vec<f64>,
    /// Steps before the series settles.
    pub transient_len: usize,
    pub steady_mean: f64,
}

/// Index `k` of the first window `[k, k+w)` whose mean differs from the next window's mean by
/// less than [`SETTLE_TOLERANCE`] relative (or both are zero). Returns `(k, mean of series[k..])`.
/// A series that never settles reports its full length and the mean of its last window.
pub fn segment(series: &[f64], window: usize) -> (usize, f64) {
    if series.is_empty() {
        return (0, 0.0);
    }
    let w = window.clamp(1, series.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    for k in 0..series.len().saturating_sub(2 * w - 1) {
        let a = mean(&series[k..k + w]);
        let b = mean(&series[k + w..k + 2 * w]);
        let settled = if a == 0.0 && b == 0.0 { true } else { (b - a).abs() < SETTLE_TOLERANCE * a.abs().max(b.abs()) };
        if settled {
            return (k, mean(&series[k..]));
        }
    }
    (series.len(), mean(&series[series.len() - w..]))
}

/// Reads `step` and `mean_drift` columns from a metrics CSV (or a run directory containing one).
pub fn read_drift(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let file: PathBuf = if path.is_dir() { path.join(METRICS_FILE) } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| HarnessError::io(&file, e))?;
    let bad = |reason: String| HarnessError::Metrics { path: file.display().to_string(), reason };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty file".into()))?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or_else(|| bad(format!("missing column `{name}`")));
    let (step_col, drift_col) = (col("step")?, col("mean_drift")?);
    if !header.iter().any(|h| h.starts_with("drift_")) {
        return Err(bad("no per-layer drift columns".into()));
    }
    let mut steps = Vec::new();
    let mut drifts = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let get = |c: usize| fields.get(c).copied().ok_or_else(|| bad(format!("row {} is short", i + 1)));
        let step: usize = get(step_col)?.parse().map_err(|_| bad(format!("row {}: bad step", i + 1)))?;
        let drift: f64 = get(drift_col)?.parse().map_err(|_| bad(format!("row {}: bad drift", i + 1)))?;
        if steps.last().is_some_and(|&s| s >= step) {
            return Err(bad(format!("row {}: step {step} is not increasing", i + 1)));
        }
        steps.push(step);
        drifts.push(drift);
    }
    Ok((steps, drifts))
}

/// Window of 5% of the series, at least one step.
pub fn default_window(len: usize) -> usize {
    (len / 20).max(1)
}

pub fn drift_report(paths: &[PathBuf], window: Option<usize>) -> Result<Vec<DriftSummary>> {
    paths
        .iter()
        .map(|p| {
            let (steps, mean_drift) = read_drift(p)?;
            let (transient_len, steady_mean) = segment(&mean_drift, window.unwrap_or_else(|| default_window(mean_drift.len())));
            Ok(DriftSummary { source: p.display().to_string(), steps, mean_drift, transient_len, steady_mean })
        })
        .collect()
}

/// Tab-separated table: one summary line per source.
pub fn render(summaries: &[DriftSummary]) -> String {
    let mut out = String::from("source\tsteps\ttransient_len\tsteady_mean\n");
    for s in summaries {
        out.push_str(&format!("{}\t{}\t{}\t{:.6e}\n", s.source, s.steps.len(), s.transient_len, s.steady_mean));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_series_has_no_transient() {
        assert_eq!(segment(&[0.0; 50], 5), (0, 0.0));
        assert_eq!(segment(&[], 5), (0, 0.0));
    }

    #[test]
    fn decaying_transient_then_plateau() {
        let series: Vec<f64> = (0..400).map(|t| if t < 100 { 1.0 - 0.009 * t as f64 } else { 0.1 }).collect();
        let (k, steady) = segment(&series, 20);
        // the first settled window pair sits where the ramp has nearly reached the plateau
        assert!((80..=100).contains(&k), "{k}");
        assert!((steady - 0.1).abs() < 0.01);
    }

    #[test]
    fn constant_nonzero_series_settles_immediately() {
        let (k, steady) = segment(&[0.05; 30], 5);
        assert_eq!(k, 0);
        assert!((steady - 0.05).abs() < 1e-15);
    }

    #[test]
    fn unsettled_series_reports_full_length() {
        let series: Vec<f64> = (0..40).map(|t| 2f64.powi(t)).collect();
        let (k, _) = segment(&series, 4);
        assert_eq!(k, 40);
    }
}
