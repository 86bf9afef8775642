//! Sweeps over topologies, variants and trials, and their on-disk outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ProblemConfig};
use crate::engine::{run_partial, RunOptions, Variant};
use crate::error::{Error, Result};
use crate::metrics::{summarize, transient_cutoff, Probe, RunMetadata, RunRecord, TransientEstimate, TransientMetric};
use crate::problem::{
    estimate_constants, make_logcosh, make_quadratic, make_ridge_tuning, BilevelProblem, ProblemConstants, QuadraticSpec,
    RidgeTuningSpec,
};
use crate::topology::{build_topology, MixingMatrix, TopologyKind};

pub const RUN_CSV_HEADER: [&str; 6] = ["t", "grad_sq_norm", "phi_gap", "consensus_error", "upper_loss", "alpha"];

pub const REFERENCE_TOPOLOGY: &str = "centralized";

const CONSTANT_SAMPLES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Diverged,
    TimeLimit,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub topology: String,
    pub variant: Variant,
    pub trial: usize,
    pub seed: u64,
    pub file: String,
    pub status: RunStatus,
    pub error: Option<String>,
    /// Iteration at which the run stopped early.
    pub stopped_at: Option<usize>,
    pub probes: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransientEntry {
    pub topology: String,
    pub variant: Variant,
    pub trial: usize,
    pub metric: TransientMetric,
    pub estimate: TransientEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub problem_seed: u64,
    pub phi_star: Option<f64>,
    /// Regularity constants, sampled over the unit box where not known.
    pub constants: Option<ProblemConstants>,
    pub topologies: Vec<TopologyEntry>,
    pub runs: Vec<RunEntry>,
    pub transient: Vec<TransientEntry>,
    pub summary_file: String,
    pub wall_seconds: f64,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyEntry {
    pub name: String,
    pub rho: f64,
}

/// Overrides taken from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub trials: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, config: &mut ExperimentConfig) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            config.run.out_dir = Some(dir.clone());
        }
        if let Some(w) = self.workers {
            config.run.workers = w;
        }
        if let Some(t) = self.trials {
            config.run.trials = t;
        }
        config.validate()
    }
}

/// Result of a sweep; `manifest.complete` is false when any run stopped early.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
    pub records: Vec<RunRecord>,
}

struct Cell {
    topology: String,
    w: MixingMatrix,
    variant: Variant,
    trial: usize,
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn format_value(v: f64) -> String {
    format!("{v:e}")
}

/// Writes one probe per row under [`RUN_CSV_HEADER`].
pub fn write_run_csv(path: &Path, record: &RunRecord) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
    writer.write_record(RUN_CSV_HEADER).map_err(|e| io_error(path, e))?;
    for p in &record.probes {
        writer
            .write_record([
                p.t.to_string(),
                format_value(p.grad_sq_norm),
                p.phi_gap.map(format_value).unwrap_or_default(),
                format_value(p.consensus_error),
                format_value(p.upper_loss),
                format_value(p.alpha),
            ])
            .map_err(|e| io_error(path, e))?;
    }
    writer.flush().map_err(|e| io_error(path, e))
}

/// Reads a run CSV back; metadata is left mostly empty.
pub fn read_run_csv(path: &Path) -> Result<RunRecord> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| io_error(path, e))?;
    let header = reader.headers().map_err(|e| io_error(path, e))?.clone();
    if header.iter().ne(RUN_CSV_HEADER) {
        return Err(Error::Parse(format!("{}: unexpected header {:?}", path.display(), header)));
    }
    let mut probes = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| io_error(path, e))?;
        let field = |k: usize| -> Result<f64> {
            row[k].parse().map_err(|_| Error::Parse(format!("{}: row {} column {}", path.display(), line + 2, RUN_CSV_HEADER[k])))
        };
        probes.push(Probe {
            t: row[0].parse().map_err(|_| Error::Parse(format!("{}: row {} column t", path.display(), line + 2)))?,
            grad_sq_norm: field(1)?,
            phi_gap: if row[2].is_empty() { None } else { Some(field(2)?) },
            consensus_error: field(3)?,
            upper_loss: field(4)?,
            alpha: field(5)?,
        });
    }
    Ok(RunRecord {
        metadata: RunMetadata {
            config_hash: String::new(),
            problem_seed: None,
            run_seed: 0,
            topology: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            variant: Variant::So,
            n: 0,
            d: 0,
            p: 0,
            phi_star: None,
        },
        probes,
    })
}

fn run_file(topology: &str, variant: Variant, trial: usize) -> String {
    format!("runs/{topology}_{}_trial{trial:03}.csv", variant.label())
}

fn status_of(error: &Option<Error>) -> RunStatus {
    match error {
        None => RunStatus::Ok,
        Some(Error::NumericalDivergence { .. }) => RunStatus::Diverged,
        Some(Error::TimeLimit { .. }) => RunStatus::TimeLimit,
        Some(_) => RunStatus::Failed,
    }
}

fn stopped_at(error: &Option<Error>) -> Option<usize> {
    match error {
        Some(Error::NumericalDivergence { iteration } | Error::TimeLimit { iteration }) => Some(*iteration),
        _ => None,
    }
}

/// Output directory: explicit setting, then `DSOBA_OUT_DIR`, then `dsoba-out`.
pub fn resolve_out_dir(config: &ExperimentConfig) -> PathBuf {
    config
        .run
        .out_dir
        .clone()
        .or_else(|| std::env::var_os("DSOBA_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("dsoba-out"))
}

/// Runs every cell of the sweep and writes run CSVs, `summary.csv` and
/// `manifest.json` under the output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Outcome> {
    config.validate()?;
    let seed = config.problem.seed();
    match config.problem {
        ProblemConfig::Quadratic { n_nodes, dim_x, dim_y, conditioning, heterogeneity, noise, .. } => {
            let spec = QuadraticSpec { n_nodes, dim_x, dim_y, conditioning, heterogeneity, noise };
            sweep(&make_quadratic(seed, &spec), config)
        }
        ProblemConfig::RidgeTuning { n_nodes, dim, heterogeneity, .. } => {
            sweep(&make_ridge_tuning(seed, &RidgeTuningSpec { dim, heterogeneity }, n_nodes), config)
        }
        ProblemConfig::Logcosh { n_nodes, dim_x, dim_y, conditioning, heterogeneity, noise, weight, .. } => {
            let spec = QuadraticSpec { n_nodes, dim_x, dim_y, conditioning, heterogeneity, noise };
            sweep(&make_logcosh(seed, &spec, weight), config)
        }
    }
}

fn sweep<P: BilevelProblem>(problem: &P, config: &ExperimentConfig) -> Result<Outcome> {
    let started = Instant::now();
    let run = &config.run;
    let out_dir = resolve_out_dir(config);
    fs::create_dir_all(out_dir.join("runs")).map_err(|e| io_error(&out_dir, e))?;

    let topologies = config.mixing_matrices()?;
    let mut cells = Vec::new();
    for (name, w) in &topologies {
        for &variant in run.variants.iter().filter(|v| **v != Variant::Centralized) {
            for trial in 0..run.trials {
                cells.push(Cell { topology: name.clone(), w: w.clone(), variant, trial });
            }
        }
    }
    let reference = run.reference || run.variants.contains(&Variant::Centralized);
    if reference {
        let full = build_topology(&TopologyKind::FullyConnected, problem.n_nodes())?.with_label(REFERENCE_TOPOLOGY);
        for trial in 0..run.trials {
            cells.push(Cell { topology: REFERENCE_TOPOLOGY.into(), w: full.clone(), variant: Variant::Centralized, trial });
        }
    }
    let l_hess_g = problem.constants().l_hess_g;
    let hash = config.hash();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(run.workers)
        .build()
        .map_err(|e| Error::Io(format!("worker pool: {e}")))?;
    let results: Vec<Result<(RunEntry, RunRecord)>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let hyper = run.hyper(cell.variant, l_hess_g)?;
                let seed = config.trial_seed(cell.trial);
                let mut options = RunOptions::new(run.iterations, run.probe_every, seed);
                options.streams = run.streams;
                let cell_start = Instant::now();
                options.deadline = run.time_limit.map(|s| cell_start + Duration::from_secs_f64(s));
                let (mut record, error) = run_partial(problem, &cell.w, &hyper, &options);
                record.metadata.config_hash = hash.clone();
                record.metadata.problem_seed = Some(config.problem.seed());
                record.metadata.topology = cell.topology.clone();
                let file = run_file(&cell.topology, cell.variant, cell.trial);
                write_run_csv(&out_dir.join(&file), &record)?;
                let entry = RunEntry {
                    topology: cell.topology.clone(),
                    variant: cell.variant,
                    trial: cell.trial,
                    seed,
                    file,
                    status: status_of(&error),
                    error: error.as_ref().map(|e| e.to_string()),
                    stopped_at: stopped_at(&error),
                    probes: record.probes.len(),
                    wall_seconds: cell_start.elapsed().as_secs_f64(),
                };
                Ok((entry, record))
            })
            .collect()
    });
    let mut entries = Vec::with_capacity(results.len());
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        let (entry, record) = r?;
        entries.push(entry);
        records.push(record);
    }

    let summary_file = "summary.csv".to_string();
    write_summary(&out_dir.join(&summary_file), &entries, &records)?;

    let mut transient = Vec::new();
    if reference {
        for (entry, record) in entries.iter().zip(&records) {
            if entry.variant == Variant::Centralized || entry.status != RunStatus::Ok {
                continue;
            }
            let reference = entries
                .iter()
                .zip(&records)
                .find(|(e, _)| e.variant == Variant::Centralized && e.trial == entry.trial && e.status == RunStatus::Ok);
            if let Some((_, cen)) = reference {
                let estimate = transient_cutoff(record, cen, run.rel_tol, run.window, run.metric)?;
                transient.push(TransientEntry {
                    topology: entry.topology.clone(),
                    variant: entry.variant,
                    trial: entry.trial,
                    metric: run.metric,
                    estimate,
                });
            }
        }
    }

    let manifest = Manifest {
        config: config.clone(),
        config_hash: hash,
        problem_seed: config.problem.seed(),
        phi_star: problem.phi_star(),
        constants: estimate_constants(problem, 1.0, CONSTANT_SAMPLES, &mut ChaCha8Rng::seed_from_u64(config.problem.seed())).ok(),
        topologies: topologies.iter().map(|(name, w)| TopologyEntry { name: name.clone(), rho: w.rho() }).collect(),
        complete: entries.iter().all(|e| e.status == RunStatus::Ok),
        runs: entries,
        transient,
        summary_file,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    let manifest_path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text + "\n").map_err(|e| io_error(&manifest_path, e))?;
    Ok(Outcome { out_dir, manifest, records })
}

fn write_summary(path: &Path, entries: &[RunEntry], records: &[RunRecord]) -> Result<()> {
    let mut groups: Vec<(String, Variant)> = Vec::new();
    for e in entries {
        if !groups.iter().any(|(t, v)| *t == e.topology && *v == e.variant) {
            groups.push((e.topology.clone(), e.variant));
        }
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
    writer
        .write_record([
            "topology",
            "variant",
            "t",
            "records",
            "grad_sq_norm_mean",
            "grad_sq_norm_stderr",
            "phi_gap_mean",
            "phi_gap_stderr",
            "consensus_error_mean",
            "consensus_error_stderr",
            "upper_loss_mean",
            "upper_loss_stderr",
            "alpha",
        ])
        .map_err(|e| io_error(path, e))?;
    for (topology, variant) in groups {
        let complete: Vec<RunRecord> = entries
            .iter()
            .zip(records)
            .filter(|(e, _)| e.topology == topology && e.variant == variant && e.status == RunStatus::Ok)
            .map(|(_, r)| r.clone())
            .collect();
        if complete.is_empty() {
            continue;
        }
        for row in summarize(&complete)? {
            writer
                .write_record([
                    topology.clone(),
                    variant.label().to_string(),
                    row.t.to_string(),
                    row.records.to_string(),
                    format_value(row.grad_sq_norm.mean),
                    format_value(row.grad_sq_norm.stderr),
                    row.phi_gap.map(|s| format_value(s.mean)).unwrap_or_default(),
                    row.phi_gap.map(|s| format_value(s.stderr)).unwrap_or_default(),
                    format_value(row.consensus_error.mean),
                    format_value(row.consensus_error.stderr),
                    format_value(row.upper_loss.mean),
                    format_value(row.upper_loss.stderr),
                    format_value(row.alpha.mean),
                ])
                .map_err(|e| io_error(path, e))?;
        }
    }
    writer.flush().map_err(|e| io_error(path, e))
}
