//! Exit codes and outputs of the `hyerslab` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyerslab")).args(args).current_dir(root()).output().unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn validate_exit_codes() {
    let ok = run(&["validate", "specs/m2.json"]);
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(json(&ok)["violations"].as_array().unwrap().len(), 0);
    assert_eq!(run(&["validate", "specs/m2_explicit.json"]).status.code(), Some(0));
    assert_eq!(run(&["validate", "specs/m2_plus_c.json"]).status.code(), Some(0));

    let broken = run(&["validate", "specs/m2_broken_associativity.json"]);
    assert_eq!(broken.status.code(), Some(1));
    assert_eq!(json(&broken)["violations"][0]["invariant"], "associativity");
    let unit = run(&["validate", "specs/m2_broken_unit.json"]);
    assert_eq!(unit.status.code(), Some(1));
    assert!(json(&unit)["violations"][0]["residual"].as_f64().unwrap() >= 1e-12);

    assert_eq!(run(&["validate", "specs/malformed.json"]).status.code(), Some(2));
    assert_eq!(run(&["validate", "specs/does_not_exist.json"]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["solve", "specs/m2.json", "--kind", "nonsense"]).status.code(), Some(2));
    assert_eq!(run(&["experiment", "configs/m2_bounded.json", "--samples", "ten"]).status.code(), Some(2));
    // fewer than 100 samples is a config error
    assert_eq!(run(&["experiment", "configs/m2_bounded.json", "--samples", "10"]).status.code(), Some(2));
}

#[test]
fn solve_reports_oracle_dimensions() {
    for (spec, kind, dim) in [
        ("specs/m2.json", "jordan-derivation", 3),
        ("specs/m2.json", "generalized-jordan-pair", 7),
        ("specs/complex.json", "jordan-derivation", 0),
        ("specs/dual_numbers.json", "jordan-derivation", 1),
    ] {
        let out = run(&["solve", spec, "--kind", kind]);
        assert_eq!(out.status.code(), Some(0), "{spec} {kind}");
        let v = json(&out);
        assert_eq!(v["dimension"], dim, "{spec} {kind}");
        assert_eq!(v["basis"].as_array().unwrap().len(), dim);
    }
    let a = run(&["solve", "specs/m2.json", "--kind", "generalized-jordan-pair"]);
    let b = run(&["solve", "specs/m2.json", "--kind", "generalized-jordan-pair"]);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(run(&["solve", "specs/m2_broken_associativity.json"]).status.code(), Some(1));
}

#[test]
fn experiments_and_merge() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let pass = run(&["experiment", "configs/m2_superstab_exact.json", "--out", out]);
    assert_eq!(pass.status.code(), Some(0), "{}", String::from_utf8_lossy(&pass.stderr));
    let rep = read_json(&dir.path().join("m2_superstab_exact.json"));
    assert_eq!(rep["report"], "superstability");
    assert_eq!(rep["passed"], true);
    assert_eq!(rep["seed"], 20240200);
    assert!(dir.path().join("m2_superstab_exact.f.csv").exists());

    let fail = run(&["experiment", "configs/expected_failure/m2_power2_ascending.json", "--out", out]);
    assert_eq!(fail.status.code(), Some(1));
    let rep = read_json(&dir.path().join("m2_power2_ascending.json"));
    assert_eq!(rep["report"], "failure");
    assert_eq!(rep["stage"], "hyers_limit");
    assert_eq!(rep["error_kind"], "NoConvergence");

    // the same config passes once the direction is overridden
    let desc = run(&["experiment", "configs/expected_failure/m2_power2_ascending.json", "--direction", "descending", "--samples", "500"]);
    assert_eq!(desc.status.code(), Some(0));
    assert_eq!(json(&desc)["direction"], "descending");

    let a = dir.path().join("m2_superstab_exact.json");
    let b = dir.path().join("m2_power2_ascending.json");
    let merged = run(&["report-merge", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(merged.status.code(), Some(1));
    let v = json(&merged);
    assert_eq!(v["n_passed"], 1);
    assert_eq!(v["n_failed"], 1);
    let only = run(&["report-merge", a.to_str().unwrap()]);
    assert_eq!(only.status.code(), Some(0));
}

#[test]
fn hyers_subcommand_writes_history() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["hyers", "configs/m2_bounded.json", "--tol", "1e-8", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read_json(&dir.path().join("m2_bounded.hyers.json"));
    assert!(summary["result"]["iterations_used"].as_u64().unwrap() <= 40);
    let csv = std::fs::read_to_string(dir.path().join("m2_bounded.hyers.csv")).unwrap();
    assert!(csv.starts_with("basis_index,n,distance,scaled_bound\n"));
    let p2 = run(&["hyers", "configs/expected_failure/m2_power2_ascending.json"]);
    assert_eq!(p2.status.code(), Some(1));
}

#[test]
fn floats_are_written_with_seventeen_digits() {
    let out = run(&["solve", "specs/m2.json", "--kind", "derivation"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let sample = text.split("\"residual\": ").nth(1).unwrap().split([',', '\n']).next().unwrap();
    let mantissa = sample.split('e').next().unwrap().trim_start_matches('-');
    assert_eq!(mantissa.chars().filter(|c| c.is_ascii_digit()).count(), 17, "{sample}");
}
