mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mople::metrics::{ami, ari};
use mople::{load_dataset, validate_fit_result, ColumnSchema, FitResult};
use serde_json::Value;
use tempfile::TempDir;

fn mople(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mople"))
        .args(args)
        .env_remove("MOPLE_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

fn prestige() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/data/prestige.csv").to_string()
}

fn read_fit(dir: &Path) -> FitResult {
    let text = fs::read_to_string(dir.join("fit.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const PRESTIGE_COLUMNS: [&str; 6] = ["--y", "prestige", "--x", "education", "--u", "income"];

#[test]
fn toy_single_component_fit_matches_profile_oracle() {
    let tmp = TempDir::new().unwrap();
    let csv = path(&tmp, "toy.csv");
    fs::write(&csv, "y,x1,u\n1.0,0.5,0.1\n2.5,1.0,0.2\n2.0,2.0,0.3\n").unwrap();
    let out_dir = path(&tmp, "out");
    let out = mople(&[
        "fit", "--data", s(&csv), "--components", "1", "--bandwidth", "1e6", "--out", s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let f = read_fit(&out_dir);
    validate_fit_result(&f).unwrap();
    let data = load_dataset(&csv, &ColumnSchema::new("y", &["x1"], "u")).unwrap();
    let oracle = common::profile_beta(&data, 1e6);
    assert!((f.experts.beta[(0, 0)] - oracle[0]).abs() < 1e-8);
    let ols = common::ols_with_intercept(&data);
    assert!((f.experts.beta[(0, 0)] - ols[1]).abs() < 1e-6);
    assert!(out_dir.join("manifest.json").exists());
    assert!(out_dir.join("curve_1.csv").exists());
}

#[test]
fn zero_components_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let out = mople(&[
        "fit", "--data", &prestige(), "--y", "prestige", "--x", "education", "--u", "income",
        "--components", "0", "--bandwidth", "5000", "--out", s(&path(&tmp, "o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["exit_code"], 1);
    assert!(err["message"].as_str().unwrap().contains("at least 1"));
}

#[test]
fn usage_errors_exit_one() {
    let out = mople(&["fit", "--components", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "invalid_arguments");
    let out = mople(&["--threads", "0", "evaluate", "--fit", "a", "--labels", "b"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn tiny_bandwidth_grid_is_infeasible() {
    // distinct u and a bandwidth below their spacing leave nothing to profile
    let tmp = TempDir::new().unwrap();
    let csv = path(&tmp, "toy.csv");
    fs::write(&csv, "y,x1,u\n1.0,0.5,0.1\n2.5,1.0,0.2\n2.0,2.0,0.3\n").unwrap();
    let out = mople(&[
        "select", "--data", s(&csv), "--components-range", "1", "--bandwidths", "1e-9",
        "--out", s(&path(&tmp, "o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["exit_code"], 2);
    assert_eq!(err["error"], "all_candidates_infeasible");
}

#[test]
fn prestige_fit_emits_one_curve_per_component_and_evaluates() {
    let tmp = TempDir::new().unwrap();
    let out_dir = path(&tmp, "fit");
    let data = prestige();
    let mut args = vec!["fit", "--data", &data];
    args.extend(PRESTIGE_COLUMNS);
    args.extend(["--components", "3", "--bandwidth", "6000", "--out", s(&out_dir)]);
    let out = mople(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for k in 1..=3 {
        let text = fs::read_to_string(out_dir.join(format!("curve_{k}.csv"))).unwrap();
        assert_eq!(text.lines().count(), 101);
    }
    assert!(!out_dir.join("curve_4.csv").exists());

    let fit_json = out_dir.join("fit.json");
    let eval = mople(&[
        "evaluate", "--fit", s(&fit_json), "--labels", &data, "--label-column", "type",
    ]);
    assert_eq!(eval.status.code(), Some(0), "{}", String::from_utf8_lossy(&eval.stderr));
    let v = stdout_json(&eval);

    let f = read_fit(&out_dir);
    let types = mople::cli::read_labels(Path::new(&data), Some("type")).unwrap();
    let mut names: Vec<String> = Vec::new();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (label, t) in f.labels.iter().zip(&types) {
        if let Some(t) = t {
            let id = names.iter().position(|n| n == t).unwrap_or_else(|| {
                names.push(t.clone());
                names.len() - 1
            });
            a.push(*label);
            b.push(id);
        }
    }
    assert_eq!(v["n"], a.len());
    assert_eq!(v["ignored"], 4);
    let round = |x: f64| (x * 1e4).round() / 1e4;
    assert_eq!(round(v["ari"].as_f64().unwrap()), round(ari(&a, &b).unwrap()));
    assert_eq!(round(v["ami"].as_f64().unwrap()), round(ami(&a, &b).unwrap()));
}

#[test]
fn evaluate_against_own_and_trivial_labels() {
    let tmp = TempDir::new().unwrap();
    let out_dir = path(&tmp, "fit");
    let data = prestige();
    let mut args = vec!["fit", "--data", &data];
    args.extend(PRESTIGE_COLUMNS);
    args.extend(["--components", "2", "--bandwidth", "8000", "--out", s(&out_dir)]);
    assert_eq!(mople(&args).status.code(), Some(0));
    let f = read_fit(&out_dir);
    let fit_json = out_dir.join("fit.json");

    let own = path(&tmp, "own.csv");
    let mut text = String::from("label\n");
    for l in &f.labels {
        text.push_str(&format!("c{l}\n"));
    }
    fs::write(&own, text).unwrap();
    let v = stdout_json(&mople(&["evaluate", "--fit", s(&fit_json), "--labels", s(&own)]));
    assert_eq!(v["ari"].as_f64().unwrap(), 1.0);
    assert!((v["ami"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    let single = path(&tmp, "single.csv");
    fs::write(&single, format!("label\n{}", "a\n".repeat(f.labels.len()))).unwrap();
    let v = stdout_json(&mople(&["evaluate", "--fit", s(&fit_json), "--labels", s(&single)]));
    assert_eq!(v["ari"].as_f64().unwrap(), 0.0);

    let short = path(&tmp, "short.csv");
    fs::write(&short, "label\na\nb\n").unwrap();
    let out = mople(&["evaluate", "--fit", s(&fit_json), "--labels", s(&short)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "label_length_mismatch");
}

#[test]
fn single_cell_select_matches_fit() {
    let tmp = TempDir::new().unwrap();
    let data = prestige();
    let fit_dir = path(&tmp, "fit");
    let sel_dir = path(&tmp, "sel");
    let mut fit_args = vec!["fit", "--data", &data];
    fit_args.extend(PRESTIGE_COLUMNS);
    fit_args.extend(["--components", "2", "--bandwidth", "7000", "--seed", "4", "--out", s(&fit_dir)]);
    assert_eq!(mople(&fit_args).status.code(), Some(0));
    let mut sel_args = vec!["select", "--data", &data];
    sel_args.extend(PRESTIGE_COLUMNS);
    sel_args.extend([
        "--components-range", "2", "--bandwidths", "7000", "--seed", "4", "--out", s(&sel_dir),
    ]);
    assert_eq!(mople(&sel_args).status.code(), Some(0));
    assert_eq!(read_fit(&fit_dir), read_fit(&sel_dir));
    let grid = fs::read_to_string(sel_dir.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 2);
}

#[test]
fn prestige_select_grid_has_one_row_per_cell() {
    let tmp = TempDir::new().unwrap();
    let data = prestige();
    let out_dir = path(&tmp, "sel");
    let mut args = vec!["select", "--data", &data];
    args.extend(PRESTIGE_COLUMNS);
    args.extend(["--components-range", "1..5", "--auto-grid", "--out", s(&out_dir)]);
    let out = mople(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_path(out_dir.join("grid.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    let mut per_h = std::collections::BTreeMap::new();
    for r in &rows {
        *per_h.entry(r[1].to_string()).or_insert(0) += 1;
    }
    assert_eq!(per_h.len(), 10);
    assert!(per_h.values().all(|&k| k == 5));
    let chosen = read_fit(&out_dir).config.components;
    assert!(out_dir.join(format!("curve_{chosen}.csv")).exists());
}

#[test]
fn simulate_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let run = |name: &str| {
        let dir = path(&tmp, name);
        let out = mople(&[
            "simulate", "--case", "1", "--n-list", "250", "--replications", "2", "--seed", "3",
            "--restarts", "3", "--out-dir", s(&dir),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        dir
    };
    let a = run("a");
    let b = run("b");
    let report: Value = serde_json::from_str(&fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    let records = report["records"].as_array().unwrap();
    for method in ["moe", "fmplr", "mople"] {
        assert_eq!(records.iter().filter(|r| r["method"] == method).count(), 2);
    }
    assert_eq!(
        fs::read(a.join("summary.csv")).unwrap(),
        fs::read(b.join("summary.csv")).unwrap()
    );
}
