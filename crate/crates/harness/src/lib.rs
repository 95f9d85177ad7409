//! Experiment harness for `oasis-core`: configuration, synthetic tasks, training runs,
//! sweeps, drift summaries and the oracle self-check.

pub mod config;
pub mod data;
pub mod drift;
pub mod error;
pub mod experiment;
pub mod oracle;
pub mod output;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use experiment::{execute, run_experiment, RunOutcome};
