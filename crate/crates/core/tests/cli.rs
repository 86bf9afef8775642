use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dsoba::cli::{read_run_csv, ExperimentConfig, Manifest, RunStatus, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO, EXIT_OK};

const SMALL: &str = r#"
[problem]
family = "quadratic"
seed = 5
n_nodes = 6
dim_x = 3
dim_y = 4
heterogeneity = 1.0
noise = 0.2

[topology.ring]
kind = "adjusted_ring"

[topology.full]
kind = "fully_connected"

[run]
variants = ["so", "fo"]
alpha = 0.05
iterations = 300
probe_every = 25
trials = 2
"#;

fn dsoba(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dsoba"));
    cmd.args(args).env_remove("DSOBA_OUT_DIR");
    if let Some(dir) = env_out {
        cmd.env("DSOBA_OUT_DIR", dir);
    }
    cmd.output().expect("spawn dsoba")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.push(("summary.csv".into(), std::fs::read(dir.join("summary.csv")).unwrap()));
    files.sort();
    files
}

#[test]
fn run_writes_outputs_and_is_worker_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "small.toml", SMALL);
    let (one, two) = (tmp.path().join("one"), tmp.path().join("two"));
    let a = dsoba(&["run", config.to_str().unwrap(), "--out", one.to_str().unwrap(), "--workers", "1"], None);
    let b = dsoba(&["run", config.to_str().unwrap(), "--out", two.to_str().unwrap(), "--workers", "3"], None);
    assert_eq!(a.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(b.status.code(), Some(EXIT_OK));

    let files = csv_files(&one);
    // 2 topologies x 2 variants x 2 trials + 2 centralized references + summary
    assert_eq!(files.len(), 11);
    assert_eq!(files, csv_files(&two));

    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(one.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest.complete);
    assert_eq!(manifest.runs.len(), 10);
    assert!(manifest.runs.iter().all(|r| r.status == RunStatus::Ok && r.probes == 13));
    assert_eq!(manifest.transient.len(), 8);
    assert_eq!(manifest.config_hash, manifest.config.hash());
    let constants = manifest.constants.as_ref().unwrap();
    assert!(constants.mu_g >= 0.5 && constants.l_hess_g.is_some());
    let again: Manifest = serde_json::from_str(&serde_json::to_string(&manifest).unwrap()).unwrap();
    assert_eq!(again, manifest);
    assert_eq!(ExperimentConfig::parse(SMALL).unwrap().hash(), manifest.config_hash);

    let record = read_run_csv(&one.join(&manifest.runs[0].file)).unwrap();
    assert_eq!(record.grid(), (0..=300).step_by(25).collect::<Vec<_>>());
}

#[test]
fn output_directory_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "small.toml", SMALL);
    let out = tmp.path().join("env-out");
    let result = dsoba(&["run", config.to_str().unwrap(), "--trials", "1"], Some(&out));
    assert_eq!(result.status.code(), Some(EXIT_OK));
    assert!(out.join("manifest.json").is_file());
}

#[test]
fn validate_reports_topologies() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "small.toml", SMALL);
    let out = dsoba(&["validate", config.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("topology ring: n = 6"), "{text}");
    assert!(text.contains("topology full: n = 6, rho = 0.000000"));
}

#[test]
fn configuration_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let typo = write_config(tmp.path(), "typo.toml", &SMALL.replace("alpha = 0.05", "alpha_zero = 0.05"));
    let out = dsoba(&["validate", typo.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha_zero"));

    let bad_shape = write_config(tmp.path(), "shape.toml", &SMALL.replace("kind = \"adjusted_ring\"", "kind = \"torus\"\nrows = 2\ncols = 2"));
    assert_eq!(dsoba(&["validate", bad_shape.to_str().unwrap()], None).status.code(), Some(EXIT_CONFIG));

    let negative = write_config(tmp.path(), "neg.toml", &SMALL.replace("alpha = 0.05", "alpha = -1.0"));
    assert_eq!(dsoba(&["run", negative.to_str().unwrap()], Some(tmp.path())).status.code(), Some(EXIT_CONFIG));
}

#[test]
fn missing_file_exits_three() {
    let out = dsoba(&["validate", "/nonexistent/dsoba.toml"], None);
    assert_eq!(out.status.code(), Some(EXIT_IO));
}

#[test]
fn divergence_exits_two_and_keeps_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "hot.toml", &SMALL.replace("alpha = 0.05", "alpha = 8.0\ntheta = 1.0"));
    let out_dir = tmp.path().join("hot");
    let out = dsoba(&["run", config.to_str().unwrap(), "--out", out_dir.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(EXIT_DIVERGENCE), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest.runs.iter().any(|r| r.status == RunStatus::Diverged && r.stopped_at.is_some()));
}

#[test]
fn transient_subcommand_prints_estimate() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "small.toml", SMALL);
    let out_dir = tmp.path().join("out");
    assert_eq!(dsoba(&["run", config.to_str().unwrap(), "--out", out_dir.to_str().unwrap()], None).status.code(), Some(EXIT_OK));
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    let run = manifest.runs.iter().find(|r| r.topology == "ring").unwrap();
    let reference = manifest.runs.iter().find(|r| r.topology == "centralized" && r.trial == run.trial).unwrap();
    let out = dsoba(
        &["transient", out_dir.join(&run.file).to_str().unwrap(), out_dir.join(&reference.file).to_str().unwrap(), "--window", "3"],
        None,
    );
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let value: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(value["window"], 3);
    assert!(value["cutoff_iteration"].as_u64().unwrap() <= 301);
}
