use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sbridge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbridge")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn betas(v: &Value) -> Vec<f64> {
    v["beta_hat"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn simulate_writes_k_times_l_aggregate_rows_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(sbridge(&["simulate", "--seed", "9", "--out", path(&a)]).status.success());
    assert!(sbridge(&["simulate", "--seed", "9", "--out", path(&b)]).status.success());
    let aggs = fs::read_to_string(a.join("aggregates.csv")).unwrap();
    assert_eq!(aggs.lines().count(), 1 + 45 * 5);
    for f in ["units.csv", "aggregates.csv", "ground_truth.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn metadata_alone_reproduces_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"num_cells": 10, "surrogate_dim": 2, "num_folds": 3, "units_per_cell": 9}"#).unwrap();
    let a = dir.path().join("a");
    let out = sbridge(&["simulate", "--config", path(&cfg), "--cells", "12", "--seed", "4", "--out", path(&a)]);
    assert!(out.status.success());
    // flag beats file
    let aggs = fs::read_to_string(a.join("aggregates.csv")).unwrap();
    assert_eq!(aggs.lines().count(), 1 + 12 * 3);
    assert!(aggs.starts_with("cell_id,fold_id,count,s_mean_1,s_mean_2,y_mean\n"));

    let b = dir.path().join("b");
    let meta = a.join("metadata.json");
    assert!(sbridge(&["simulate", "--config", path(&meta), "--out", path(&b)]).status.success());
    assert_eq!(fs::read(a.join("units.csv")).unwrap(), fs::read(b.join("units.csv")).unwrap());
}

#[test]
fn noise_free_estimates_recover_beta_and_methods_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"num_cells": 30, "eps_scale": 0, "eta_scale": 0, "u_scale": 0}"#).unwrap();
    let sim = dir.path().join("sim");
    assert!(sbridge(&["simulate", "--config", path(&cfg), "--out", path(&sim)]).status.success());
    let truth: Value = serde_json::from_str(&fs::read_to_string(sim.join("ground_truth.json")).unwrap()).unwrap();
    let beta = betas(&serde_json::json!({ "beta_hat": truth["beta"] }));
    let aggs = sim.join("aggregates.csv");
    let units = sim.join("units.csv");

    let jive = sbridge(&["estimate", path(&aggs), "--method", "jive"]);
    assert!(jive.status.success());
    let jive = json(&jive);
    assert_eq!(jive["estimator_tag"], "JIVE_LFOLD");
    for (b, t) in betas(&jive).iter().zip(&beta) {
        assert!((b - t).abs() < 1e-10);
    }
    let ols = json(&sbridge(&["estimate", path(&units), "--method", "ols"]));
    assert_eq!(ols["estimator_tag"], "OLS");
    let tsls = json(&sbridge(&["estimate", path(&aggs), "--method", "tsls"]));
    assert_eq!(tsls["estimator_tag"], "TSLS");
    for (b, t) in betas(&ols).iter().chain(&betas(&tsls)).zip(beta.iter().cycle()) {
        assert!((b - t).abs() < 1e-10);
    }
}

#[test]
fn jive_and_erm_linear_agree_on_noisy_input() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    assert!(sbridge(&["simulate", "--seed", "21", "--cells", "60", "--out", path(&sim)]).status.success());
    for file in ["aggregates.csv", "units.csv"] {
        let input = sim.join(file);
        let jive = betas(&json(&sbridge(&["estimate", path(&input), "--method", "jive"])));
        let erm_out = json(&sbridge(&["estimate", path(&input), "--method", "erm-linear"]));
        assert_eq!(erm_out["estimator_tag"], "ERM_LINEAR");
        for (a, b) in jive.iter().zip(betas(&erm_out)) {
            assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()), "{file}: {a} vs {b}");
        }
    }
}

#[test]
fn two_fold_interval_from_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"num_cells": 200, "surrogate_dim": 1, "num_folds": 2, "first_stage": {"kind": "gaussian", "row_scale": 0.5}}"#)
        .unwrap();
    let sim = dir.path().join("sim");
    assert!(sbridge(&["simulate", "--config", path(&cfg), "--out", path(&sim)]).status.success());
    let report_dir = dir.path().join("rep");
    let out =
        sbridge(&["estimate", path(&sim.join("aggregates.csv")), "--method", "jive2-ci", "--alpha", "0.05", "--out", path(&report_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&out);
    assert_eq!(r["estimator_tag"], "JIVE_2FOLD");
    assert!((r["ci_multiplier"].as_f64().unwrap() - 1.959964).abs() < 1e-6);
    let (lo, hi) = (r["ci_lower"].as_f64().unwrap(), r["ci_upper"].as_f64().unwrap());
    assert!(lo.is_finite() && hi.is_finite() && lo < hi);
    assert_eq!(fs::read(report_dir.join("report.json")).unwrap(), out.stdout);
    let meta: Value = serde_json::from_str(&fs::read_to_string(report_dir.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["method"], "jive2-ci");
}

#[test]
fn sweep_smoke_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sw");
    let one = sbridge(&["sweep", "--k-grid", "45", "--reps", "5", "--parallelism", "1", "--out", path(&out)]);
    assert!(one.status.success());
    let text = String::from_utf8(one.stdout.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "K,estimator,mse,mse_se,coverage,coverage_se,n_reps,n_failures");
    assert_eq!(lines.len(), 4);
    assert_eq!(fs::read(out.join("sweep.csv")).unwrap(), one.stdout);
    let eight = sbridge(&["sweep", "--k-grid", "45", "--reps", "5", "--parallelism", "8"]);
    assert_eq!(one.stdout, eight.stdout);
    let sub = sbridge(&["sweep", "--k-grid", "45", "--reps", "5", "--method", "jive,ols"]);
    assert_eq!(String::from_utf8(sub.stdout).unwrap().lines().count(), 3);
}

#[test]
fn verify_ident_passes_on_100_instances() {
    let out = sbridge(&["verify-ident", "--reps", "100"]);
    assert!(out.status.success());
    let v = json(&out);
    assert_eq!(v["instances"].as_array().unwrap().len(), 100);
    assert!(v["max_gap"].as_f64().unwrap() < 1e-10);
    assert!(v["counterexample"]["gap"].as_f64().unwrap() > 1e-2);
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let bad_cfg = dir.path().join("bad.json");
    fs::write(&bad_cfg, "{ not json").unwrap();
    assert_eq!(sbridge(&["simulate", "--config", path(&bad_cfg)]).status.code(), Some(2));
    assert_eq!(sbridge(&["sweep", "--alpha", "2"]).status.code(), Some(2));

    let csv = dir.path().join("broken.csv");
    fs::write(&csv, "cell_id,fold_id,count,s_mean_1,y_mean\n1,1,3,0.5,1.0\n1,2,3,abc,1.0\n").unwrap();
    let out = sbridge(&["estimate", path(&csv)]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("broken.csv"), "{err}");

    let missing = dir.path().join("nope").join("x.csv");
    let out = sbridge(&["estimate", path(&missing)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("x.csv"));

    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let out = sbridge(&["simulate", "--out", path(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sub"));

    // H_K = 1 * (-1) + 0.5 * (-0.5) < 0
    let weak = dir.path().join("weak.csv");
    fs::write(&weak, "cell_id,fold_id,count,s_mean_1,y_mean\n1,1,2,1,1\n1,2,2,-1,2\n2,1,2,0.5,3\n2,2,2,-0.5,4\n").unwrap();
    let out = sbridge(&["estimate", path(&weak), "--method", "jive2-ci"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("weak"));

    assert_eq!(sbridge(&["verify-ident", "--reps", "3", "--tolerance", "1e-300"]).status.code(), Some(5));
}
