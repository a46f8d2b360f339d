// End-to-end tests of the installed binary: exit codes, artifact layout,
// header stability, and byte-identical reruns.

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mflq_core::turnpike::CSV_HEADER;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mflq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn first_line(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    text.lines().next().unwrap_or_default().to_string()
}

fn problem(name: &str) -> String {
    common::problems_dir().join(name).to_str().unwrap().to_string()
}

#[test]
fn validate_passes_on_the_scalar_benchmark() {
    let out = run(&["validate", &problem("scalar_benchmark.json")]);
    let text = stdout(&out);
    assert_eq!(out.status.code(), Some(0), "stdout:\n{text}");
    assert!(text.contains("delta = 1.000000e0"), "stdout:\n{text}");
    assert!(text.contains("PASS"), "stdout:\n{text}");
}

#[test]
fn validate_names_the_violated_condition_on_a_zero_control_weight() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("no_r.json");
    fs::write(
        &path,
        r#"{
  "n": 1, "m": 1, "tau": 1.0,
  "coefficients": {
    "A": {"kind": "constant", "value": [[-1.0]]},
    "B": {"kind": "constant", "value": [[1.0]]},
    "Q": {"kind": "constant", "value": [[1.0]]}
  }
}"#,
    )
    .unwrap();
    let out = run(&["validate", path.to_str().unwrap()]);
    let text = stdout(&out);
    assert_eq!(out.status.code(), Some(1), "stdout:\n{text}");
    assert!(
        text.contains("control weight R is not uniformly positive definite"),
        "stdout:\n{text}"
    );
}

#[test]
fn turnpike_writes_one_csv_per_horizon_with_the_documented_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "turnpike",
        &problem("scalar_benchmark_offsets.json"),
        "--T",
        "10,20",
        "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stdout:\n{}", stdout(&out));
    for horizon in ["10", "20"] {
        let csv = dir.path().join(format!("turnpike_T{horizon}.csv"));
        assert!(csv.is_file(), "missing {}", csv.display());
        assert_eq!(first_line(&csv), CSV_HEADER);
    }
    let summary = fs::read_to_string(dir.path().join("turnpike_summary.txt")).unwrap();
    assert!(summary.trim_end().ends_with("overall: pass"), "{summary}");
    assert!(dir.path().join("turnpike_summary.json").is_file());
}

#[test]
fn turnpike_reruns_are_byte_identical() {
    let args = |out: &Path| {
        vec![
            "turnpike".to_string(),
            problem("scalar_benchmark_offsets.json"),
            "--T".into(),
            "5,10".into(),
            "-o".into(),
            out.to_str().unwrap().into(),
        ]
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let o1 = run(&args(d1.path()).iter().map(String::as_str).collect::<Vec<_>>());
    let o2 = run(&args(d2.path()).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o1.status.code(), Some(0));
    assert_eq!(o2.status.code(), Some(0));
    for name in [
        "turnpike_T5.csv",
        "turnpike_T10.csv",
        "turnpike_summary.txt",
        "turnpike_summary.json",
    ] {
        let a = fs::read(d1.path().join(name)).unwrap();
        let b = fs::read(d2.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn simulate_reruns_are_byte_identical() {
    let args = |out: &Path| {
        vec![
            "simulate".to_string(),
            problem("scalar_benchmark_offsets.json"),
            "--particles".into(),
            "400".into(),
            "--seed".into(),
            "1".into(),
            "--T".into(),
            "2".into(),
            "-o".into(),
            out.to_str().unwrap().into(),
        ]
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let o1 = run(&args(d1.path()).iter().map(String::as_str).collect::<Vec<_>>());
    let o2 = run(&args(d2.path()).iter().map(String::as_str).collect::<Vec<_>>());
    assert_ne!(o1.status.code(), Some(2), "stdout:\n{}", stdout(&o1));
    assert_eq!(o1.status.code(), o2.status.code());
    for name in ["simulate_means.csv", "simulate_summary.json"] {
        let a = fs::read(d1.path().join(name)).unwrap();
        let b = fs::read(d2.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn riccati_writes_the_finite_horizon_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "riccati",
        &problem("scalar_benchmark.json"),
        "--T",
        "3",
        "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stdout:\n{}", stdout(&out));
    let csv = dir.path().join("riccati_T3.csv");
    assert!(csv.is_file());
    assert!(first_line(&csv).starts_with("t,P_1,Pi_1,"));
}

#[test]
fn input_errors_exit_with_code_2_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("broken.json");
    fs::write(&bad, "{ this is not json").unwrap();
    let outdir = dir.path().join("artifacts");

    let out = run(&[
        "turnpike",
        bad.to_str().unwrap(),
        "--T",
        "5",
        "-o",
        outdir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!outdir.exists(), "output directory was created on exit 2");

    // wrong-length initial state, well-formed problem
    let out = run(&[
        "turnpike",
        &problem("scalar_benchmark.json"),
        "--T",
        "5",
        "--x0",
        "1,2",
        "-o",
        outdir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!outdir.exists(), "output directory was created on exit 2");

    let out = run(&["riccati", &problem("scalar_benchmark.json"), "--T", "0"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}
