//! Experiment configuration: a flat key-value TOML document, sections allowed for grouping.

use std::path::{Path, PathBuf};

use oasis_core::subspace::{CovarianceNorm, OjaConfig, TrackerKind};
use oasis_core::optim::AdamHyper;
use oasis_core::traingraph::LayerConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Regression,
    DriftingRegression,
    MlpClassify,
    CharSeq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackerName {
    Oja,
    PeriodicPca,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormName {
    Frobenius,
    SpectralEstimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    /// Input width of the first layer (ignored by `char-seq`, which uses `context * vocab`).
    pub d: usize,
    /// Output width: regression targets or classes.
    pub m: usize,
    pub hidden: usize,
    /// Sequences per batch (`b`).
    pub batch: usize,
    /// Rows per sequence (`n`); a batch holds `N = b * n` activation rows.
    pub seq_len: usize,
    pub rank: usize,
    /// Dimension of the planted activation subspace.
    pub r_true: usize,
    /// Radians per step of the planted basis rotation.
    pub rotation_rate: f64,
    pub noise: f64,
    pub vocab: usize,
    pub context: usize,
    pub embed: usize,

    pub tracker: TrackerName,
    /// Subspace learning rate; `0` with `tracker = "oja"` leaves the basis fixed.
    pub gamma: f64,
    pub interval: usize,
    pub norm: NormName,
    pub tracker_stride: usize,
    pub compress: bool,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: ScheduleKind,
    pub warmup_frac: f64,
    /// Floor of the cosine schedule as a fraction of `lr`.
    pub min_lr_frac: f64,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,

    pub steps: usize,
    pub eval_every: usize,
    pub eval_rows: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub elem_size: usize,
    /// Fill the `wall_ms` column; off keeps metrics byte-reproducible.
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::DriftingRegression,
            d: 64,
            m: 8,
            hidden: 32,
            batch: 32,
            seq_len: 1,
            rank: 4,
            r_true: 4,
            rotation_rate: 0.05,
            noise: 0.1,
            vocab: 12,
            context: 3,
            embed: 16,
            tracker: TrackerName::Oja,
            gamma: 0.1,
            interval: 10,
            norm: NormName::Frobenius,
            tracker_stride: 1,
            compress: true,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: ScheduleKind::Cosine,
            warmup_frac: 0.05,
            min_lr_frac: 0.0,
            grad_clip: None,
            steps: 2000,
            eval_every: 100,
            eval_rows: 512,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            elem_size: 2,
            record_timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Parses a config. Tables are flattened into the top level, so `[optimizer]\nlr = 0.01`
    /// and `lr = 0.01` are equivalent; a key set twice is an error.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| HarnessError::Config(format!("{e}")))?;
        let mut flat = toml::Table::new();
        flatten_into(&mut flat, table)?;
        let cfg: Self = toml::Value::Table(flat)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Input width of the first layer.
    pub fn input_dim(&self) -> usize {
        match self.task {
            TaskKind::CharSeq => self.context * self.vocab,
            _ => self.d,
        }
    }

    pub fn rows_per_batch(&self) -> usize {
        self.batch * self.seq_len
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(HarnessError::Config(msg));
        let dims = [
            ("d", self.d),
            ("m", self.m),
            ("hidden", self.hidden),
            ("batch", self.batch),
            ("seq_len", self.seq_len),
            ("rank", self.rank),
            ("r_true", self.r_true),
            ("vocab", self.vocab),
            ("context", self.context),
            ("embed", self.embed),
            ("interval", self.interval),
            ("tracker_stride", self.tracker_stride),
            ("steps", self.steps),
            ("eval_every", self.eval_every),
            ("eval_rows", self.eval_rows),
            ("elem_size", self.elem_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return err(format!("{name} must be >= 1"));
            }
        }
        if self.rank > self.input_dim() {
            return err(format!("rank {} exceeds input dimension {}", self.rank, self.input_dim()));
        }
        if matches!(self.task, TaskKind::Regression | TaskKind::DriftingRegression | TaskKind::MlpClassify) {
            if 2 * self.r_true > self.d {
                return err(format!("r_true {} needs a {}-dimensional rotation plane but d = {}", self.r_true, 2 * self.r_true, self.d));
            }
            if self.task == TaskKind::MlpClassify && self.m < 2 {
                return err("mlp-classify needs m >= 2 classes".into());
            }
        }
        if self.task == TaskKind::CharSeq && self.vocab < 2 {
            return err("char-seq needs vocab >= 2".into());
        }
        if !(self.rotation_rate >= 0.0 && self.rotation_rate.is_finite()) {
            return err(format!("rotation_rate must be >= 0, got {}", self.rotation_rate));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return err(format!("noise must be >= 0, got {}", self.noise));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return err(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return err(format!("warmup_frac must lie in [0, 1), got {}", self.warmup_frac));
        }
        if !(0.0..=1.0).contains(&self.min_lr_frac) {
            return err(format!("min_lr_frac must lie in [0, 1], got {}", self.min_lr_frac));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return err(format!("grad_clip must be > 0, got {c}"));
            }
        }
        self.hyper(self.lr).validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn tracker_kind(&self) -> TrackerKind {
        match self.tracker {
            TrackerName::Oja if self.gamma == 0.0 => TrackerKind::Fixed,
            TrackerName::Oja => TrackerKind::Oja(OjaConfig {
                gamma: self.gamma,
                norm: match self.norm {
                    NormName::Frobenius => CovarianceNorm::Frobenius,
                    NormName::SpectralEstimate => CovarianceNorm::SpectralEstimate,
                },
                ..OjaConfig::default()
            }),
            TrackerName::PeriodicPca => TrackerKind::PeriodicPca { interval: self.interval },
            TrackerName::Fixed => TrackerKind::Fixed,
        }
    }

    pub fn layer_config(&self) -> LayerConfig {
        LayerConfig {
            rank: self.rank,
            tracker: self.tracker_kind(),
            tracker_stride: self.tracker_stride,
            compress: self.compress,
        }
    }

    pub fn hyper(&self, lr: f64) -> AdamHyper {
        AdamHyper { lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    /// Learning rate for 1-based step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        match self.schedule {
            ScheduleKind::Constant => self.lr,
            ScheduleKind::Cosine => {
                let warmup = (self.warmup_frac * self.steps as f64).ceil() as usize;
                if t <= warmup {
                    return self.lr * t as f64 / warmup as f64;
                }
                let span = (self.steps - warmup).max(1) as f64;
                let progress = ((t - warmup) as f64 / span).min(1.0);
                let floor = self.min_lr_frac * self.lr;
                floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

fn flatten_into(out: &mut toml::Table, table: toml::Table) -> Result<()> {
    for (key, value) in table {
        match value {
            toml::Value::Table(inner) => flatten_into(out, inner)?,
            other => {
                if out.insert(key.clone(), other).is_some() {
                    return Err(HarnessError::Config(format!("key `{key}` set more than once")));
                }
            }
        }
    }
    Ok(())
}
