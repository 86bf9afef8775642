//! Experiment configuration files.
//!
//! ```toml
//! [problem]
//! family = "ridge_tuning"
//! seed = 1
//! n_nodes = 9
//! dim = 10
//! heterogeneity = 2.0
//!
//! [topology.ring]
//! kind = "adjusted_ring"
//!
//! [topology.torus]
//! kind = "torus"
//! rows = 3
//! cols = 3
//!
//! [run]
//! variants = ["so"]
//! alpha = 0.1
//! theta = 0.2
//! schedule = "stage_decay"
//! decay_factor = 0.8
//! decay_period = 1000
//! iterations = 10000
//! probe_every = 10
//! trials = 10
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{DeltaSchedule, HyperParams, Schedule, StreamMode, Variant};
use crate::error::{Error, Result};
use crate::metrics::{TransientMetric, DEFAULT_WINDOW};
use crate::topology::{build_topology, MixingMatrix, TopologyKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    Quadratic {
        seed: u64,
        n_nodes: usize,
        dim_x: usize,
        dim_y: usize,
        #[serde(default = "default_conditioning")]
        conditioning: f64,
        #[serde(default)]
        heterogeneity: f64,
        #[serde(default)]
        noise: f64,
    },
    RidgeTuning {
        seed: u64,
        n_nodes: usize,
        dim: usize,
        heterogeneity: f64,
    },
    Logcosh {
        seed: u64,
        n_nodes: usize,
        dim_x: usize,
        dim_y: usize,
        #[serde(default = "default_conditioning")]
        conditioning: f64,
        #[serde(default)]
        heterogeneity: f64,
        #[serde(default)]
        noise: f64,
        #[serde(default = "default_weight")]
        weight: f64,
    },
}

fn default_conditioning() -> f64 {
    10.0
}

fn default_weight() -> f64 {
    1.0
}

impl ProblemConfig {
    pub fn seed(&self) -> u64 {
        match *self {
            ProblemConfig::Quadratic { seed, .. } | ProblemConfig::RidgeTuning { seed, .. } | ProblemConfig::Logcosh { seed, .. } => seed,
        }
    }

    pub fn n_nodes(&self) -> usize {
        match *self {
            ProblemConfig::Quadratic { n_nodes, .. }
            | ProblemConfig::RidgeTuning { n_nodes, .. }
            | ProblemConfig::Logcosh { n_nodes, .. } => n_nodes,
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(invalid(&format!("problem.{key}"), "must be at least 1"))
            } else {
                Ok(())
            }
        };
        let non_negative = |key: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(&format!("problem.{key}"), "must be finite and non-negative"))
            }
        };
        positive("n_nodes", self.n_nodes())?;
        match *self {
            ProblemConfig::Quadratic { dim_x, dim_y, conditioning, heterogeneity, noise, .. }
            | ProblemConfig::Logcosh { dim_x, dim_y, conditioning, heterogeneity, noise, .. } => {
                positive("dim_x", dim_x)?;
                positive("dim_y", dim_y)?;
                if !(conditioning >= 1.0) {
                    return Err(invalid("problem.conditioning", "must be at least 1"));
                }
                non_negative("heterogeneity", heterogeneity)?;
                non_negative("noise", noise)?;
                if let ProblemConfig::Logcosh { weight, .. } = *self {
                    non_negative("weight", weight)?;
                }
            }
            ProblemConfig::RidgeTuning { dim, heterogeneity, .. } => {
                positive("dim", dim)?;
                non_negative("heterogeneity", heterogeneity)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Constant,
    StageDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaKind {
    #[default]
    Fixed,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub variants: Vec<Variant>,
    /// Also run the centralized reference used for transient estimates.
    pub reference: bool,
    pub alpha: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub theta: Option<f64>,
    pub tau: f64,
    pub schedule: ScheduleKind,
    pub decay_factor: f64,
    pub decay_period: usize,
    pub delta: f64,
    pub delta_mode: DeltaKind,
    /// Target bias for adaptive perturbations.
    pub iota: f64,
    /// Third-derivative bound for adaptive perturbations.
    pub l_hess_g: Option<f64>,
    pub z_clamp: Option<f64>,
    pub iterations: usize,
    pub probe_every: usize,
    pub trials: usize,
    pub base_seed: u64,
    pub streams: StreamMode,
    pub out_dir: Option<PathBuf>,
    pub workers: usize,
    /// Per-run wall-clock limit in seconds.
    pub time_limit: Option<f64>,
    pub rel_tol: f64,
    pub window: usize,
    pub metric: TransientMetric,
}

impl Default for RunConfig {
    fn default() -> Self {
        let h = HyperParams::default();
        RunConfig {
            variants: vec![Variant::So],
            reference: true,
            alpha: h.alpha0,
            c1: h.c1,
            c2: h.c2,
            c3: h.c3,
            theta: h.theta,
            tau: h.tau,
            schedule: ScheduleKind::Constant,
            decay_factor: 0.8,
            decay_period: 1000,
            delta: 1e-3,
            delta_mode: DeltaKind::Fixed,
            iota: 1e-6,
            l_hess_g: None,
            z_clamp: None,
            iterations: 1000,
            probe_every: 10,
            trials: 1,
            base_seed: 0,
            streams: StreamMode::PerNode,
            out_dir: None,
            workers: 1,
            time_limit: None,
            rel_tol: 0.2,
            window: DEFAULT_WINDOW,
            metric: TransientMetric::UpperLoss,
        }
    }
}

impl RunConfig {
    /// Hyperparameters for one variant; `l_hess_g` falls back to the problem's
    /// own bound when adaptive perturbations are requested.
    pub fn hyper(&self, variant: Variant, problem_l_hess_g: Option<f64>) -> Result<HyperParams> {
        let delta = match self.delta_mode {
            DeltaKind::Fixed => DeltaSchedule::Fixed { delta: self.delta },
            DeltaKind::Adaptive => DeltaSchedule::Adaptive {
                max: self.delta,
                iota: self.iota,
                l_hess_g: self
                    .l_hess_g
                    .or(problem_l_hess_g)
                    .ok_or_else(|| invalid("run.l_hess_g", "required for adaptive delta on this problem"))?,
            },
        };
        let hyper = HyperParams {
            variant,
            alpha0: self.alpha,
            c1: self.c1,
            c2: self.c2,
            c3: self.c3,
            theta: self.theta,
            tau: self.tau,
            schedule: match self.schedule {
                ScheduleKind::Constant => Schedule::Constant,
                ScheduleKind::StageDecay => Schedule::StageDecay { factor: self.decay_factor, period: self.decay_period },
            },
            delta,
            z_clamp: self.z_clamp,
        };
        hyper.validate().map_err(|e| match e {
            Error::Validation { key, message } => Error::Validation { key: format!("run.{key}"), message },
            other => other,
        })?;
        Ok(hyper)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub topology: BTreeMap<String, TopologyKind>,
    #[serde(default)]
    pub run: RunConfig,
}

fn invalid(key: &str, message: impl Into<String>) -> Error {
    Error::Validation { key: key.into(), message: message.into() }
}

/// Maps a deserializer message onto a key-level diagnostic where possible.
fn diagnose(message: &str) -> Error {
    let message = message.trim().to_string();
    if let Some(rest) = message.split("unknown field `").nth(1) {
        if let Some(key) = rest.split('`').next() {
            return Error::Validation { key: key.to_string(), message: format!("unknown key\n{message}") };
        }
    }
    if let Some(rest) = message.split("unknown variant `").nth(1) {
        if let Some(value) = rest.split('`').next() {
            return Error::Validation { key: value.to_string(), message: format!("unknown value\n{message}") };
        }
    }
    if let Some(rest) = message.split("missing field `").nth(1) {
        if let Some(key) = rest.split('`').next() {
            return Error::Validation { key: key.to_string(), message: format!("missing key\n{message}") };
        }
    }
    Error::Parse(message)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| diagnose(&e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| diagnose(&e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        let run = &self.run;
        if run.trials == 0 {
            return Err(invalid("run.trials", "must be at least 1"));
        }
        if run.probe_every == 0 {
            return Err(invalid("run.probe_every", "must be at least 1"));
        }
        if run.workers == 0 {
            return Err(invalid("run.workers", "must be at least 1"));
        }
        if run.window == 0 {
            return Err(invalid("run.window", "must be at least 1"));
        }
        if !(run.rel_tol >= 0.0) {
            return Err(invalid("run.rel_tol", "must be non-negative"));
        }
        if run.variants.is_empty() {
            return Err(invalid("run.variants", "must list at least one variant"));
        }
        if let Some(limit) = run.time_limit {
            if !(limit > 0.0) {
                return Err(invalid("run.time_limit", "must be positive"));
            }
        }
        let decentralized = run.variants.iter().any(|v| *v != Variant::Centralized);
        if decentralized && self.topology.is_empty() {
            return Err(invalid("topology", "at least one topology is required"));
        }
        if self.topology.contains_key("centralized") {
            return Err(invalid("topology.centralized", "name is reserved for the reference run"));
        }
        self.mixing_matrices()?;
        for variant in &run.variants {
            // l_hess_g is only known once the problem is built
            if let Err(e @ Error::Validation { .. }) = run.hyper(*variant, Some(1.0)) {
                return Err(e);
            }
        }
        Ok(())
    }

    /// Mixing matrix of every named topology, in name order.
    pub fn mixing_matrices(&self) -> Result<Vec<(String, MixingMatrix)>> {
        let n = self.problem.n_nodes();
        self.topology
            .iter()
            .map(|(name, kind)| {
                build_topology(kind, n)
                    .map(|w| (name.clone(), w.with_label(name)))
                    .map_err(|e| invalid(&format!("topology.{name}"), e.to_string()))
            })
            .collect()
    }

    /// Hash of every field that influences results.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.run.out_dir = None;
        canonical.run.workers = 1;
        hex::encode(Sha256::digest(serde_json::to_vec(&canonical).expect("config serializes")))
    }

    /// Seed of trial `k`.
    pub fn trial_seed(&self, k: usize) -> u64 {
        self.run.base_seed.wrapping_add(k as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[problem]
family = "quadratic"
seed = 3
n_nodes = 4
dim_x = 2
dim_y = 3

[topology.full]
kind = "fully_connected"

[run]
iterations = 100
"#;

    #[test]
    fn minimal_config() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.run.iterations, 100);
        assert_eq!(c.run.variants, vec![Variant::So]);
        assert_eq!(c.topology["full"], TopologyKind::FullyConnected);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = MINIMAL.replace("iterations = 100", "iterations = 100\nalpha_zero = 0.1");
        match ExperimentConfig::parse(&text).unwrap_err() {
            Error::Validation { key, message } => {
                assert_eq!(key, "alpha_zero");
                assert!(message.contains("line"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_values_name_the_key() {
        let text = MINIMAL.replace("iterations = 100", "iterations = 100\ntrials = 0");
        assert!(matches!(ExperimentConfig::parse(&text), Err(Error::Validation { key, .. }) if key == "run.trials"));
        let text = MINIMAL.replace("fully_connected\"", "torus\"\nrows = 3\ncols = 3");
        assert!(matches!(ExperimentConfig::parse(&text), Err(Error::Validation { key, .. }) if key == "topology.full"));
        let text = MINIMAL.replace("iterations = 100", "tau = -1.0");
        assert!(matches!(ExperimentConfig::parse(&text), Err(Error::Validation { key, .. }) if key == "run.tau"));
    }

    #[test]
    fn syntax_errors_report_position() {
        let err = ExperimentConfig::parse("[problem\nfamily = 1").unwrap_err();
        assert!(matches!(err, Error::Parse(ref m) if m.contains("line")), "{err:?}");
    }

    #[test]
    fn json_round_trip_and_hash() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut moved = c.clone();
        moved.run.out_dir = Some("elsewhere".into());
        moved.run.workers = 8;
        assert_eq!(moved.hash(), c.hash());
        moved.run.alpha = 0.2;
        assert_ne!(moved.hash(), c.hash());
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(ExperimentConfig::parse(&c.to_toml()).unwrap(), c);
    }
}
