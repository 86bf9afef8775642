//! Command-line front end.

pub mod config;
pub mod experiment;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{ExperimentConfig, ProblemConfig, RunConfig};
pub use experiment::{read_run_csv, run_experiment, write_run_csv, Manifest, Outcome, Overrides, RunStatus};

use crate::error::Error;
use crate::metrics::{transient_cutoff, TransientMetric, DEFAULT_WINDOW};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DIVERGENCE: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Exit code for an error.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Io(_) => EXIT_IO,
        Error::NumericalDivergence { .. } | Error::TimeLimit { .. } | Error::LowerSolveDiverged { .. } | Error::SingularHessian => {
            EXIT_DIVERGENCE
        }
        _ => EXIT_CONFIG,
    }
}

#[derive(Debug, Parser)]
#[command(name = "dsoba", version, about = "Decentralized stochastic bilevel optimization simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every topology x variant x trial cell of an experiment.
    Run {
        config: PathBuf,
        /// Output directory (default: config value, then DSOBA_OUT_DIR, then ./dsoba-out).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Parse and check a configuration without running it.
    Validate { config: PathBuf },
    /// Transient-iteration estimate of one run CSV against a reference CSV.
    Transient {
        run: PathBuf,
        reference: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        rel_tol: f64,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        #[arg(long, value_enum, default_value_t = MetricArg::UpperLoss)]
        metric: MetricArg,
        /// Subtracted from upper_loss for the excess-loss metric.
        #[arg(long)]
        offset: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum MetricArg {
    GradSqNorm,
    PhiGap,
    ConsensusError,
    UpperLoss,
    ExcessLoss,
}

impl From<MetricArg> for TransientMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::GradSqNorm => TransientMetric::GradSqNorm,
            MetricArg::PhiGap => TransientMetric::PhiGap,
            MetricArg::ConsensusError => TransientMetric::ConsensusError,
            MetricArg::UpperLoss => TransientMetric::UpperLoss,
            MetricArg::ExcessLoss => TransientMetric::ExcessLoss,
        }
    }
}

/// Executes a parsed command and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    match cli.command {
        Command::Run { config, out, workers, trials } => {
            let outcome = ExperimentConfig::load(&config).and_then(|mut c| {
                Overrides { out_dir: out, workers, trials }.apply(&mut c)?;
                run_experiment(&c)
            });
            match outcome {
                Ok(outcome) => {
                    let failed: Vec<_> = outcome.manifest.runs.iter().filter(|r| r.status != RunStatus::Ok).collect();
                    println!(
                        "{} runs written to {} ({} stopped early)",
                        outcome.manifest.runs.len(),
                        outcome.out_dir.display(),
                        failed.len()
                    );
                    for r in &failed {
                        eprintln!("{} {} trial {}: {}", r.topology, r.variant.label(), r.trial, r.error.as_deref().unwrap_or(""));
                    }
                    if failed.is_empty() {
                        EXIT_OK
                    } else {
                        EXIT_DIVERGENCE
                    }
                }
                Err(e) => report(&e),
            }
        }
        Command::Validate { config } => match ExperimentConfig::load(&config).and_then(|c| c.mixing_matrices().map(|w| (c, w))) {
            Ok((c, matrices)) => {
                println!("config ok (hash {})", c.hash());
                for (name, w) in matrices {
                    println!("  topology {name}: n = {}, rho = {:.6}", w.n(), w.rho());
                }
                EXIT_OK
            }
            Err(e) => report(&e),
        },
        Command::Transient { run, reference, rel_tol, window, metric, offset } => {
            let estimate = read_run_csv(&run).and_then(|mut r| {
                let mut c = read_run_csv(&reference)?;
                r.metadata.phi_star = offset;
                c.metadata.phi_star = offset;
                transient_cutoff(&r, &c, rel_tol, window, metric.into())
            });
            match estimate {
                Ok(e) => {
                    println!("{}", serde_json::to_string(&e).expect("estimate serializes"));
                    EXIT_OK
                }
                Err(e) => report(&e),
            }
        }
    }
}

fn report(e: &Error) -> i32 {
    eprintln!("error: {e}");
    exit_code(e)
}
