use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gfftree(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gfftree"))
        .args(args)
        .env("GFFTREE_OUT", out)
        .output()
        .unwrap()
}

#[test]
fn hstar_prints_the_critical_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = gfftree(dir.path(), &["hstar", "--d", "2", "--n-nodes", "801"]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let h = v["h_star"].as_f64().unwrap();
    assert!(h > 0.9 && h < 1.1, "{h}");
    assert!((v["lambda_check"].as_f64().unwrap() - 1.0).abs() < 1e-8);
    let manifest: Value = serde_json::from_slice(&fs::read(dir.path().join("hstar_d2/critical.json")).unwrap()).unwrap();
    assert_eq!(manifest["run_config"]["n_nodes"], 801);
    assert!(dir.path().join("hstar_d2/chi.csv").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["hstar", "--d", "1"][..],
        &["gamma", "--s", "0"],
        &["hstar", "--n-nodes", "10"],
        &["simulate", "--h", "1.0", "--replicas", "0"],
        &["verify", "no-such-experiment"],
        &["simulate", "--h", "1.0", "--seed", "banana"],
    ] {
        assert_eq!(gfftree(dir.path(), args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn invalid_parameters_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = gfftree(dir.path(), &["verify", "tail", "--n-nodes", "601", "--a", "-3", "--replicas", "10"]);
    assert_eq!(out.status.code(), Some(2));
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"], "invalid_parameter");
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["simulate", "--d", "2", "--h", "1.0", "--a", "1.0", "--replicas", "10", "--seed", "7"];
    let csv = dir.path().join("simulate_d2_seed7/clusters.csv");
    assert!(gfftree(dir.path(), &args).status.success());
    let first = fs::read(&csv).unwrap();
    assert!(gfftree(dir.path(), &args).status.success());
    assert_eq!(first, fs::read(&csv).unwrap());
    assert_eq!(String::from_utf8(first).unwrap().lines().count(), 11);
    let manifest: Value =
        serde_json::from_slice(&fs::read(dir.path().join("simulate_d2_seed7/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["run_config"]["seed"], 7);
    assert_eq!(manifest["run_config"]["a"], 1.0);
}

#[test]
fn eta_above_h_star_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = gfftree(dir.path(), &["eta", "--d", "2", "--h", "2.02", "--n-nodes", "801"]);
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("eta_d2_h2.02/eta.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("a,eta_plus,eta"));
    for line in lines {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(cols[1].abs() < 1e-6 && cols[2].abs() < 1e-6, "{line}");
    }
}

#[test]
fn verify_writes_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = gfftree(
        dir.path(),
        &["verify", "branching", "--n-nodes", "801", "--replicas", "2000", "--seed", "11"],
    );
    assert!(matches!(out.status.code(), Some(0) | Some(1)));
    let run = dir.path().join("branching_d2_seed11");
    for f in ["report.json", "rows.csv", "martingale.csv", "depth_probes.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let report: Value = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["run_config"]["seed"], 11);
    assert!(report["report"]["verdicts"].as_array().unwrap().len() >= 4);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().all(|l| l.starts_with("PASS") || l.starts_with("FAIL")));
}
