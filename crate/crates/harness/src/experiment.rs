//! Single-run driver: build the model, train with the configured schedule, evaluate,
//! and write the run directory.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use oasis_core::numerics::Rng;
use oasis_core::traingraph::{LossKind, MemoryLedger, Model};
use serde::Serialize;

use crate::config::{ExperimentConfig, TaskKind};
use crate::data::TaskStream;
use crate::error::{HarnessError, Result};
use crate::output::write_atomic;

const MODEL_STREAM: u64 = 2;

pub const METRICS_FILE: &str = "metrics.csv";
pub const LEDGER_FILE: &str = "ledger.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILURE_MARKER: &str = "FAILED";

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    /// Held-out loss for regression, held-out accuracy for classification; `None` between evaluations.
    pub eval_metric: Option<f64>,
    pub mean_drift: f64,
    pub drifts: Vec<f64>,
    pub gamma_eff: f64,
    pub wall_ms: f64,
}

/// In-memory result of a run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub layer_names: Vec<String>,
    pub rows: Vec<MetricsRow>,
    pub ledger: Option<MemoryLedger>,
    /// Error message when training aborted.
    pub failure: Option<String>,
}

impl RunOutcome {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    /// Eval metric at the last evaluated step.
    pub fn final_eval(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eval_metric)
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.train_loss)
    }

    pub fn csv_header(&self) -> String {
        let mut h = String::from("step,train_loss,eval_metric,mean_drift");
        for name in &self.layer_names {
            write!(h, ",drift_{name}").unwrap();
        }
        h.push_str(",gamma_eff,wall_ms");
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.csv_header();
        out.push('\n');
        for r in &self.rows {
            write!(out, "{},{}", r.step, fmt(r.train_loss)).unwrap();
            match r.eval_metric {
                Some(v) => write!(out, ",{}", fmt(v)).unwrap(),
                None => out.push(','),
            }
            write!(out, ",{}", fmt(r.mean_drift)).unwrap();
            for d in &r.drifts {
                write!(out, ",{}", fmt(*d)).unwrap();
            }
            writeln!(out, ",{},{}", fmt(r.gamma_eff), fmt(r.wall_ms)).unwrap();
        }
        out
    }
}

/// 17 significant digits: enough to round-trip any f64.
pub fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    seed: u64,
    status: &'static str,
    error: Option<&'a str>,
    steps_completed: usize,
    final_train_loss: Option<f64>,
    final_eval_metric: Option<f64>,
    config: &'a ExperimentConfig,
}

pub fn build_model(cfg: &ExperimentConfig) -> Result<Model> {
    let mut rng = Rng::new(cfg.seed).fork(MODEL_STREAM);
    let layer = cfg.layer_config();
    let model = match cfg.task {
        TaskKind::Regression | TaskKind::DriftingRegression => Model::linear_regression(cfg.d, cfg.m, layer, &mut rng)?,
        TaskKind::MlpClassify => Model::mlp2(cfg.d, cfg.hidden, cfg.m, LossKind::SoftmaxCrossEntropy, layer, &mut rng)?,
        TaskKind::CharSeq => Model::seq_block(cfg.vocab, cfg.context, cfg.embed, cfg.hidden, layer, &mut rng)?,
    };
    Ok(model.with_elem_size(cfg.elem_size))
}

fn eval_metric(model: &Model, stream: &TaskStream, t: usize) -> Result<f64> {
    let (loss, acc) = model.evaluate(&stream.eval_batch(t))?;
    Ok(acc.unwrap_or(loss))
}

/// Trains without touching the filesystem. Errors only on invalid configuration;
/// a diverging run is reported through `RunOutcome::failure` with the rows gathered so far.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let stream = TaskStream::new(cfg)?;
    let mut model = build_model(cfg)?;
    model.initialize(&stream.train_batch(0).inputs)?;
    let layer_names: Vec<String> =
        model.layers().filter(|l| l.is_compressed()).map(|l| l.name().to_string()).collect();

    let mut outcome = RunOutcome { layer_names, rows: Vec::with_capacity(cfg.steps), ledger: None, failure: None };
    let clock = Instant::now();
    for t in 1..=cfg.steps {
        let batch = stream.train_batch(t);
        let report = match model.train_step_clipped(&batch, &cfg.hyper(cfg.lr_at(t)), cfg.grad_clip) {
            Ok(r) => r,
            Err(e) => {
                outcome.failure = Some(e.to_string());
                break;
            }
        };
        let eval = if t % cfg.eval_every == 0 || t == cfg.steps { Some(eval_metric(&model, &stream, t)?) } else { None };
        outcome.rows.push(MetricsRow {
            step: report.step,
            train_loss: report.loss,
            eval_metric: eval,
            mean_drift: report.mean_drift(),
            drifts: report.drifts.iter().map(|(_, d)| *d).collect(),
            gamma_eff: report.gamma_eff,
            wall_ms: if cfg.record_timing { clock.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
        });
        outcome.ledger = Some(report.ledger);
    }
    Ok(outcome)
}

/// Writes `metrics.csv`, `ledger.json`, `manifest.json` and, on failure, a `FAILED` marker.
pub fn write_run(cfg: &ExperimentConfig, outcome: &RunOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write_atomic(&dir.join(METRICS_FILE), outcome.to_csv().as_bytes())?;
    let ledger = outcome.ledger.as_ref().map_or_else(|| "null".to_string(), MemoryLedger::to_json);
    write_atomic(&dir.join(LEDGER_FILE), ledger.as_bytes())?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        status: if outcome.succeeded() { "ok" } else { "failed" },
        error: outcome.failure.as_deref(),
        steps_completed: outcome.rows.len(),
        final_train_loss: outcome.final_train_loss(),
        final_eval_metric: outcome.final_eval(),
        config: cfg,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    let marker = dir.join(FAILURE_MARKER);
    match &outcome.failure {
        Some(msg) => write_atomic(&marker, msg.as_bytes())?,
        None if marker.exists() => std::fs::remove_file(&marker).map_err(|e| HarnessError::io(&marker, e))?,
        None => {}
    }
    Ok(())
}

/// Trains and writes the run directory `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let outcome = execute(cfg)?;
    write_run(cfg, &outcome, &cfg.output_dir)?;
    Ok(outcome)
}
