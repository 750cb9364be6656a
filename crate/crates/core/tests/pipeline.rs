//! Stage-by-stage runs through the artifact files, as the `run` subcommand does.

use std::fs;

use adaptrep::env_gen::{Family, TaskId};
use adaptrep::experiment::{closed_form_ols_risk, reproduce, run_stage, ExperimentConfig, MetricsDoc, StageArgs};
use adaptrep::io::{self, FineTuneDoc, SourceDoc};
use adaptrep::target_adapt::AdaptMode;
use adaptrep::Error;

fn linear_args(dir: &std::path::Path) -> StageArgs {
    let mut a = StageArgs::new(dir);
    a.family = Family::Linear;
    a.d = 8;
    a.k = 2;
    a.num_tasks = 30;
    a.n_s = 60;
    a.restarts = 2;
    a.seed = 11;
    a
}

#[test]
fn gen_env_is_byte_identical_for_a_fixed_seed() {
    let one = tempfile::tempdir().unwrap();
    let two = tempfile::tempdir().unwrap();
    for fam in [Family::Linear, Family::Logistic, Family::Nn, Family::HardcaseLinear, Family::HardcaseRelu] {
        let mut a = linear_args(one.path());
        a.family = fam;
        run_stage("gen-env", &a).unwrap();
        a.out = two.path().to_path_buf();
        run_stage("gen-env", &a).unwrap();
        let x = fs::read(one.path().join("env.json")).unwrap();
        let y = fs::read(two.path().join("env.json")).unwrap();
        assert_eq!(x, y, "{fam:?}");
    }
}

#[test]
fn train_source_produces_orthonormal_representation() {
    let dir = tempfile::tempdir().unwrap();
    let a = linear_args(dir.path());
    run_stage("gen-env", &a).unwrap();
    run_stage("train-source", &a).unwrap();
    let doc: SourceDoc = io::read_json(&dir.path().join("source.json")).unwrap();
    let sol = doc.to_solution().unwrap();
    let g = sol.b0.transpose() * &sol.b0;
    assert!((g - nalgebra::DMatrix::identity(2, 2)).norm() <= 1e-8);
    assert_eq!(sol.restart_losses.len(), 2);
    assert_eq!(sol.train_loss, sol.restart_losses.iter().cloned().fold(f64::INFINITY, f64::min));
}

#[test]
fn ignore_rep_then_eval_matches_closed_form_risk() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = linear_args(dir.path());
    a.mode = AdaptMode::IgnoreRep;
    a.n_t = 40;
    a.n_mc = 1000;
    for stage in ["gen-env", "train-source", "finetune", "eval"] {
        run_stage(stage, &a).unwrap();
    }
    let env = io::read_env(&dir.path().join("env.json")).unwrap();
    let ft: FineTuneDoc = io::read_json(&dir.path().join("finetune.json")).unwrap();
    let ds = io::read_dataset_csv(&dir.path().join("target.csv"), TaskId::Target, 0).unwrap();
    let task = ft.target.to_task().unwrap();
    let oracle = closed_form_ols_risk(&ds, &task.theta_star, &env.sigma).unwrap();
    let m: MetricsDoc = io::read_json(&dir.path().join("metrics.json")).unwrap();
    assert!((m.report.excess_risk - oracle).abs() <= 1e-8, "{} vs {oracle}", m.report.excess_risk);
    assert!(m.report.excess_risk > 0.0);
}

#[test]
fn network_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = linear_args(dir.path());
    a.family = Family::Nn;
    a.n_t = 30;
    a.iterations = 200;
    a.n_mc = 500;
    for stage in ["gen-env", "finetune", "eval"] {
        run_stage(stage, &a).unwrap();
    }
    let m: MetricsDoc = io::read_json(&dir.path().join("metrics.json")).unwrap();
    assert!(m.report.excess_risk.is_finite() && m.report.excess_risk >= 0.0);
    assert!(m.source_sine.is_none());
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,loss,param_norm\n"));
    assert_eq!(trace.lines().count(), 202);
}

#[test]
fn source_training_rejects_network_family() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = linear_args(dir.path());
    a.family = Family::Nn;
    run_stage("gen-env", &a).unwrap();
    assert!(matches!(run_stage("train-source", &a), Err(Error::InvalidArgument(_))));
}

#[test]
fn schema_mismatch_stops_a_stage() {
    let dir = tempfile::tempdir().unwrap();
    let a = linear_args(dir.path());
    run_stage("gen-env", &a).unwrap();
    let p = dir.path().join("env.json");
    let text = fs::read_to_string(&p).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 2");
    fs::write(&p, text).unwrap();
    assert!(matches!(run_stage("train-source", &a), Err(Error::SchemaVersion { expected: 1, found: 2 })));
}

#[test]
fn hardcase_limit_stage_writes_sines() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = StageArgs::new(dir.path());
    a.d = 10;
    a.k = 2;
    a.eps = Some(0.05);
    a.n_mc = 2000;
    run_stage("hardcase-limit", &a).unwrap();
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("limit.json")).unwrap()).unwrap();
    assert!(v["sine_to_e_k"].as_f64().unwrap() <= 0.1);
    assert!(v["sine_to_a_star"].as_f64().unwrap() >= 0.9);
}

#[test]
fn scaled_smoke_run_emits_all_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        grid: vec![32, 64],
        restarts: 2,
        pgd_iterations: 500,
        lbfgs_max_iters: 100,
        ..ExperimentConfig::default()
    }
    .scaled(0.05)
    .unwrap();
    assert_eq!((cfg.num_tasks, cfg.replications), (50, 50));
    let out = reproduce(&cfg, dir.path()).unwrap();
    for f in ["records.csv", "sine.csv", "risk.csv", "sine.svg", "risk.svg"] {
        let p = dir.path().join(f);
        assert!(fs::metadata(&p).unwrap().len() > 0, "{f}");
    }
    assert_eq!(out.records.len(), 2 * 3 * 50);
    assert!(out.records.iter().all(|r| r.error.is_none()));
}
