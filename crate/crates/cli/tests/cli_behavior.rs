//! Black-box tests of the `graphpl` binary: exit codes, artifacts, manifest.

use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn graphpl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphpl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

const TINY: &str = "\
[dataset]
samples_per_client = 40
test_samples = 30

[train]
global_rounds = 2
local_steps_per_round = 5

[eval]
every = 1
";

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(graphpl(&["--help"]).status.code(), Some(0));
    assert_eq!(graphpl(&["--version"]).status.code(), Some(0));
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = graphpl(&["--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_config_file_is_usage_error() {
    let out = graphpl(&["--config", "/nonexistent/nope.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nope.toml"), "{stderr}");
}

#[test]
fn unknown_config_key_is_usage_error_and_named() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[train]\nlr = 0.1\n");
    let out = graphpl(&["--config", &config]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("lr"), "{stderr}");
}

#[test]
fn constraint_violation_names_offending_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[fusion]\ngroups = 5\n");
    let out = graphpl(&["--config", &config]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("fusion.groups") && stderr.contains("groups must divide latent_dim"),
        "{stderr}"
    );
}

#[test]
fn successful_run_writes_artifacts_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("out");
    let out = graphpl(&[
        "--config",
        &config,
        "--seed",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    for artifact in ["config.toml", "metrics.csv", "summary.csv", "checkpoint.gpl1"] {
        assert!(out_dir.join(artifact).exists(), "missing {artifact}");
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["status"], "complete");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["method"], "graphpl");
    assert!(manifest["finished_at"].is_string());

    // the manifest's config hash matches a re-hash of the config the run wrote
    let written = std::fs::read(out_dir.join("config.toml")).unwrap();
    let expected = format!("sha256:{:x}", Sha256::digest(&written));
    assert_eq!(manifest["config_hash"], expected.as_str());

    // metrics: header plus one row per (round, client)
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("round,client_id,mean_local_loss,gq,rq"));
    assert_eq!(lines.count(), 2 * 5);
}

#[test]
fn rounds_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("out");
    let out = graphpl(&[
        "--config",
        &config,
        "--rounds",
        "1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 5, "one round, five clients");
}

#[test]
fn poe_baseline_method_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("out");
    let out = graphpl(&[
        "--config",
        &config,
        "--method",
        "poe-baseline",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("poe-baseline,"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["method"], "poe-baseline");
}

#[test]
fn sweep_csv_written_when_enabled() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &format!("{TINY}sweep = true\ncollapse = true\n"));
    let out_dir = dir.path().join("out");
    let out = graphpl(&["--config", &config, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let sweep = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let mut lines = sweep.lines();
    assert_eq!(lines.next(), Some("method,seed,noised_modality,scale,gq"));
    // 6 noise scales x 2 observed (non-missing) modalities
    assert_eq!(lines.count(), 12);
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let row = summary.lines().nth(1).unwrap();
    let collapse = row.split(',').nth(4).unwrap();
    assert!(collapse.parse::<f64>().is_ok(), "collapse score missing: {row}");
}
