use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use oasis_harness::drift::{drift_report, render as render_drift};
use oasis_harness::oracle::{render as render_oracle, run_suite, Suite};
use oasis_harness::sweep::{parse_values, run_sweep, Axis};
use oasis_harness::{run_experiment, ExperimentConfig, HarnessError, Result};

#[derive(Parser)]
#[command(name = "oasis", version, about = "Online activation-subspace training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sweep one axis over a list of values with repeated seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// rank | gamma | interval
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. `2,4,8`.
        #[arg(long)]
        values: String,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Summarize drift series of finished runs.
    Drift {
        /// Run directories or metrics CSV files.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Segmentation window in steps (default: 5% of the series).
        #[arg(long)]
        window: Option<usize>,
    },
    /// Check the implementation against independent oracles.
    Oracle {
        /// adam | eigen | projection | fd | all
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let outcome = run_experiment(&cfg)?;
            match &outcome.failure {
                Some(msg) => return Err(HarnessError::Run(format!("{}: {msg}", cfg.output_dir.display()))),
                None => println!(
                    "{}: {} steps, final eval {}",
                    cfg.output_dir.display(),
                    outcome.rows.len(),
                    outcome.final_eval().map_or("-".into(), |v| format!("{v:.6e}"))
                ),
            }
        }
        Command::Sweep { config, axis, values, seeds } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let result = run_sweep(&cfg, axis.parse::<Axis>()?, &parse_values(&values)?, seeds)?;
            print!("{}", result.to_csv());
            for cell in &result.cells {
                for e in &cell.errors {
                    eprintln!("{}={}: {e}", result.axis.name(), cell.value);
                }
            }
        }
        Command::Drift { runs, window } => {
            print!("{}", render_drift(&drift_report(&runs, window)?));
        }
        Command::Oracle { suite } => {
            let rows = run_suite(suite.parse::<Suite>()?)?;
            print!("{}", render_oracle(&rows));
            let failed = rows.iter().filter(|r| !r.passed()).map(|r| r.check.as_str()).collect::<Vec<_>>();
            if !failed.is_empty() {
                return Err(HarnessError::Oracle(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
