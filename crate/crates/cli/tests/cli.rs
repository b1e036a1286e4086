use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use blockprune::graph::{prunable_blocks, validate_graph};
use blockprune::{Checkpoint, ExperimentManifest};
use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_blockprune"));
    c.env_remove("BLOCKPRUNE_OUT").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn config(depth: usize, width: usize) -> Value {
    json!({
        "arch": {"family": "residual", "depth": depth, "width": width},
        "dataset": {"kind": "synthetic", "num_classes": 4, "n_train": 256, "n_test": 96,
                    "image_shape": [3, 8, 8], "noise": 1.0, "seed": 11},
        "seed": 5,
        "baseline": {"epochs": 4, "lr_milestones": [[0, 0.02]], "momentum": 0.9, "weight_decay": 0.0001,
                     "batch_size": 16, "augmentation": "none"},
        "probe": {"reduction": "flatten", "epoch_lrs": [0.05], "momentum": 0.9, "batch_size": 32, "feature_cap": 65536},
        "schedule": {"global_ratio": 0.5, "rounds": 2},
        "recovery": {"finetune_epochs_per_round": 2}
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn trained_baseline(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = write_config(dir, "config.json", &config(14, 4));
    let ckpt = dir.join("baseline");
    ok(&["train-baseline", "--config", s(&cfg), "--out", s(&ckpt)]);
    (cfg, ckpt)
}

#[test]
fn missing_dataset_directory_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train-baseline",
        "--cifar-dir",
        s(&dir.path().join("nowhere")),
        "--out",
        s(&dir.path().join("b")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn invalid_mode_is_a_usage_error() {
    let out = run(&["run", "--mode", "dbp-d", "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn baseline_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, first) = trained_baseline(dir.path());
    let second = dir.path().join("again");
    ok(&["train-baseline", "--config", s(&cfg), "--seed", "5", "--deterministic", "--out", s(&second)]);
    let a = Checkpoint::load(&first).unwrap();
    let b = Checkpoint::load(&second).unwrap();
    assert!(validate_graph(&a.graph).is_empty());
    assert_eq!(a.weights.to_bytes(), b.weights.to_bytes());
    let log = std::fs::read_to_string(first.join("train_log.csv")).unwrap();
    assert_eq!(log, std::fs::read_to_string(second.join("train_log.csv")).unwrap());
    assert_eq!(log.lines().count(), 1 + 4);
}

#[test]
fn probe_curve_has_one_row_per_block() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = trained_baseline(dir.path());
    let out = dir.path().join("probe");
    let stdout = ok(&["probe", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&out), "--svg"]);
    let graph = Checkpoint::load(&ckpt).unwrap().graph;
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "block_id,accuracy,contribution,degraded");
    let rows: Vec<Vec<&str>> = lines[1..].iter().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), graph.len());
    let acc: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    let contrib: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    let sum: f64 = contrib.iter().sum();
    assert!((sum - (acc[acc.len() - 1] - acc[0])).abs() < 1e-9);
    for r in &rows {
        let c: f64 = r[2].parse().unwrap();
        assert_eq!(r[3] == "true", c < 0.0);
    }
    assert!(out.join("probe_report.json").exists() && out.join("curve.svg").exists());
}

#[test]
fn run_report_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = trained_baseline(dir.path());
    let out = dir.path().join("dbp");
    let summary: Value = serde_json::from_str(&ok(&[
        "run", "--config", s(&cfg), "--baseline", s(&ckpt), "--mode", "dbp", "--G", "0.5", "--R", "2", "--out", s(&out),
    ]))
    .unwrap();
    assert!(summary["frr"].as_f64().unwrap() > 0.0);
    let m = ExperimentManifest::load(&out).unwrap();
    assert_eq!(m.rounds.len(), 2);
    assert_eq!(m.final_model().unit_count, 6 - 2);
    assert!(out.join("report/census.txt").exists());
    assert!(out.join("report/curve_model_0.csv").exists());

    // The embedded config alone reproduces the run.
    let replay_cfg = write_config(dir.path(), "replay.json", &serde_json::to_value(&m.config).unwrap());
    let replay = dir.path().join("replay");
    ok(&["run", "--config", s(&replay_cfg), "--out", s(&replay)]);
    let r = ExperimentManifest::load(&replay).unwrap();
    let ids = |m: &ExperimentManifest| m.rounds.iter().map(|r| r.pruned_ids.clone()).collect::<Vec<_>>();
    assert_eq!(ids(&r), ids(&m));

    // Zero surgery: G = 0.
    let zero = dir.path().join("zero");
    ok(&["run", "--config", s(&cfg), "--baseline", s(&ckpt), "--mode", "dbp-c", "--G", "0", "--out", s(&zero), "--latency"]);
    let z = ExperimentManifest::load(&zero).unwrap();
    assert!(z.rounds.iter().all(|r| r.pruned_ids.is_empty()));
    assert_eq!(z.final_model().flops, z.baseline.flops);

    let rep = dir.path().join("rep_zero");
    ok(&["report", s(&zero), "--out", s(&rep)]);
    let csv = std::fs::read_to_string(rep.join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "{csv}");
    let header: Vec<&str> = lines[0].split(',').collect();
    let row: Vec<&str> = lines[1].split(',').collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(col("frr").parse::<f64>().unwrap(), 0.0);
    let ar: f64 = col("ar").parse().unwrap();
    assert!(ar > 0.5 && ar < 2.0, "{ar}");

    // Joint report over both runs, and a rejected mixed-dataset one.
    let joint = dir.path().join("joint");
    ok(&["report", s(&out), s(&zero), "--out", s(&joint), "--svg"]);
    assert_eq!(std::fs::read_to_string(joint.join("results.csv")).unwrap().lines().count(), 3);
    let mut other = m.clone();
    other.dataset_id = "cifar10".into();
    let other_path = dir.path().join("other.json");
    other.save(&other_path).unwrap();
    let rejected = run(&["report", s(&out), s(&other_path), "--out", s(&dir.path().join("bad"))]);
    assert_eq!(rejected.status.code(), Some(2));
}

#[test]
fn three_round_census_covers_four_models() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = trained_baseline(dir.path());
    let out = dir.path().join("r3");
    ok(&["run", "--config", s(&cfg), "--baseline", s(&ckpt), "--mode", "dbp-c", "--G", "0.75", "--R", "3", "--out", s(&out)]);
    let census = std::fs::read_to_string(out.join("report/census.txt")).unwrap();
    assert_eq!(census.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count(), 4, "{census}");
}

#[test]
fn bench_appends_a_csv_row() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = trained_baseline(dir.path());
    let csv = dir.path().join("bench.csv");
    for _ in 0..2 {
        let summary: Value = serde_json::from_str(&ok(&[
            "bench", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--reference", s(&ckpt), "--n", "5", "--warmup", "1",
            "--csv", s(&csv),
        ]))
        .unwrap();
        assert_eq!(summary["frr"].as_f64(), Some(0.0));
        assert!(summary["mean_ms"].as_f64().unwrap() > 0.0);
    }
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("model,accuracy,flops,frr,mean_ms,ar\n"));
}

#[test]
fn ablate_runs_every_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "config.json", &config(14, 4));
    let out = dir.path().join("ablate");
    ok(&["ablate", "--config", s(&cfg), "--out", s(&out)]);
    for mode in ["dbp", "random", "dbp-a", "dbp-b", "dbp-c"] {
        let m = ExperimentManifest::load(&out.join(mode)).unwrap();
        assert_eq!(m.mode.as_str(), mode);
        assert_eq!(m.config.seed, 5);
    }
    assert!(Checkpoint::load(&out.join("baseline")).is_ok());
    assert_eq!(std::fs::read_to_string(out.join("results.csv")).unwrap().lines().count(), 6);
}

#[test]
fn deep_residual_schedule_leaves_fourteen_units() {
    // Depth 56: 27 units, two of them stage-entry projections.
    let dir = tempfile::tempdir().unwrap();
    let mut v = config(56, 2);
    v["dataset"]["n_test"] = json!(32);
    v["baseline"]["epochs"] = json!(6);
    let cfg = write_config(dir.path(), "deep.json", &v);
    let out = dir.path().join("deep");
    ok(&["run", "--config", s(&cfg), "--mode", "dbp", "--G", "0.5", "--R", "3", "--out", s(&out)]);
    let m = ExperimentManifest::load(&out).unwrap();
    assert_eq!(m.baseline.unit_count, 27);
    assert_eq!(m.schedule.initial_prunable, 25);
    assert_eq!(m.rounds.len(), 3);
    assert_eq!(m.final_model().unit_count, 14);
    let last = Checkpoint::load(&out.join("round_3")).unwrap();
    assert_eq!(prunable_blocks(&last.graph).len(), 12);
}
