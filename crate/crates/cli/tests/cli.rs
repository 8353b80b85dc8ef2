use std::path::Path;
use std::process::{Command, Output};

use fbc2c::basis::{BasisSpec, FemSpec};
use fbc2c::datagen::SampleTag;
use fbc2c::encoder::CoefficientMatrix;
use fbc2c::io::{self, Container};
use nalgebra::DMatrix;
use serde_json::Value;

fn fbc2c(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbc2c")).args(args).current_dir(dir).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

#[test]
fn gen_writes_tagged_darcy_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = fbc2c(&["gen", "--problem", "darcy1d", "--n", "2000", "--train", "500", "--test", "200", "--seed", "1", "-o", "data.fbc"], dir.path());
    ok(&out);
    let ds = io::dataset_from_container(&Container::read(&dir.path().join("data.fbc")).unwrap()).unwrap();
    assert_eq!(ds.samples(), 700);
    assert_eq!(ds.input_points.nrows(), 2000);
    assert_eq!(ds.indices(SampleTag::Train).len(), 500);
    assert_eq!(ds.indices(SampleTag::Test).len(), 200);
}

#[test]
fn diagnose_rank_one_container() {
    let dir = tempfile::tempdir().unwrap();
    let values = DMatrix::from_fn(5, 3, |i, j| (i + 1) as f64 * (j as f64 + 0.5));
    let coeffs = CoefficientMatrix {
        values,
        basis: BasisSpec::Fem(FemSpec { elements: Some(2), nodes: None, bounds: [0.0, 1.0] }),
        components: 1,
    };
    let c = io::coefficients_to_container(&coeffs, &[1.0, 0.5, 0.25], &[SampleTag::Train; 5], Value::Null).unwrap();
    c.write(&dir.path().join("a.fbc")).unwrap();
    let stdout = ok(&fbc2c(&["diagnose", "a.fbc", "--csv", "diag.csv"], dir.path()));
    assert!(stdout.lines().any(|l| l == "erank 1.000"), "{stdout}");
    let csv = std::fs::read_to_string(dir.path().join("diag.csv")).unwrap();
    assert!(csv.starts_with("cut_or_lambda,erank,variance_entropy,mean_projection_error"), "{csv}");
}

#[test]
fn pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&fbc2c(&["gen", "--problem", "darcy1d", "--n", "64", "--train", "12", "--test", "4", "-o", "small.fbc"], p));

    let stdout = ok(&fbc2c(
        &["encode", "--problem", "darcy1d", "--data", "small.fbc", "--cut", "1e-2", "-o", "coef.fbc", "--diagnostics", "diag.csv"],
        p,
    ));
    let line: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert!(line["erank"].as_f64().unwrap() >= 1.0);
    let coef = io::coefficients_from_container(&Container::read(&p.join("coef.fbc")).unwrap()).unwrap();
    assert_eq!(coef.nrows(), 16);
    let stdout = ok(&fbc2c(&["diagnose", "coef.fbc"], p));
    assert!(stdout.starts_with("erank "));

    ok(&fbc2c(&["train", "--problem", "darcy1d", "--data", "small.fbc", "--epochs", "20", "-o", "run"], p));
    for f in ["report.json", "traces.csv", "diagnostics.csv", "checkpoint.fbc", "config.toml"] {
        assert!(p.join("run").join(f).exists(), "missing {f}");
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(p.join("run/report.json")).unwrap()).unwrap();

    let stdout = ok(&fbc2c(&["eval", "--run", "run", "--data", "small.fbc", "--json", "eval.json"], p));
    let eval: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(eval["test_error"], report["final_test_error"]);
    assert_eq!(eval["epoch"], 20);

    ok(&fbc2c(&["sweep", "--problem", "darcy1d", "--data", "small.fbc", "--cuts", "1e-4,1e-2", "--epochs", "3", "-o", "sweep.csv"], p));
    let (_, rows) = io::read_csv(&p.join("sweep.csv")).unwrap();
    assert_eq!(rows.len(), 2);
}

#[test]
fn errors_are_one_json_line_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = fbc2c(&["gen", "--problem", "nope", "-o", "x.fbc"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "config");

    let out = fbc2c(&["diagnose", "absent.fbc"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let err = error_json(&out);
    assert_eq!(err["error"], "missing_file");
    assert!(err["message"].as_str().unwrap().contains("absent.fbc"));

    let out = fbc2c(&["gen", "--problem", "darcy1d", "--n", "1", "-o", "x.fbc"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(error_json(&out)["field"].is_string());
}
