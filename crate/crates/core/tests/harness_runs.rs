use std::fs;
use std::path::Path;

use neurotopo::harness::{self, read_manifest, shipped_configs, MeasureConfig, RunConfig};

fn configs_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn repository_configs_match_the_shipped_set() {
    let shipped = shipped_configs();
    let mut files: Vec<_> = fs::read_dir(configs_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    assert_eq!(files.len(), shipped.len());
    for cfg in &shipped {
        let path = configs_dir().join(format!("{}.json", cfg.name));
        let text = fs::read_to_string(&path).unwrap();
        let parsed: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(&parsed, cfg, "{}", path.display());
    }
}

#[test]
fn teacher_student_configs_load_and_validate() {
    for cfg in shipped_configs().iter().filter(|c| !c.name.starts_with("mnist")) {
        RunConfig::load(&configs_dir().join(format!("{}.json", cfg.name))).unwrap();
    }
    let large = RunConfig::load(&configs_dir().join("gd_2d_large.json")).unwrap();
    assert!(large.notes.is_some());
    assert_eq!(large.rule.eta, 3e-3);
}

#[test]
fn gd_small_keeps_component_count() {
    let mut cfg = RunConfig::load(&configs_dir().join("gd_2d_small.json")).unwrap();
    cfg.steps = 300;
    cfg.measure = MeasureConfig {
        betti_every: Some(100),
        ..Default::default()
    };
    cfg.output_dir = None;
    let log = harness::run(&cfg).unwrap();
    assert!(!log.manifest.diverged);
    let b0: Vec<usize> = log.betti_series().iter().map(|(_, b)| b.0).collect();
    assert_eq!(b0.len(), 4);
    assert!(b0.iter().all(|&b| b == b0[0]), "{b0:?}");
    assert_eq!(log.manifest.subsampled.len(), 4);
}

#[test]
fn repeated_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let base: RunConfig = serde_json::from_value(serde_json::json!({
        "seed": 5,
        "model": {"kind": "teacher_student", "input_dim": 2, "hidden": 24, "samples": 400},
        "init": {"kind": "manifold", "manifold": {"kind": "sphere"}},
        "rule": {"rule": "adam", "eta": 0.001},
        "steps": 30,
        "batch_size": 50,
        "measure": {"betti_every": 10, "sharpness_every": 15, "snapshot_every": 10, "test_every": 10},
        "sharpness": {"max_iters": 30}
    }))
    .unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let mut cfg = base.clone();
        cfg.output_dir = Some(dir.path().join(name));
        harness::run(&cfg).unwrap();
        runs.push(dir.path().join(name));
    }
    let manifest = read_manifest(&runs[0]).unwrap();
    assert_eq!(manifest.snapshots.len(), 4);
    for file in std::iter::once("metrics.csv".to_string()).chain(manifest.snapshots.iter().map(|s| s.file.clone())) {
        assert_eq!(
            fs::read(runs[0].join(&file)).unwrap(),
            fs::read(runs[1].join(&file)).unwrap(),
            "{file}"
        );
    }
    let metrics = fs::read_to_string(runs[0].join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), harness::METRICS_HEADER);
    let steps: Vec<usize> = metrics
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(steps.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn stop_criterion_and_loss_window() {
    let cfg: RunConfig = serde_json::from_value(serde_json::json!({
        "model": {"kind": "teacher_student", "input_dim": 1, "hidden": 8, "samples": 200},
        "rule": {"rule": "gd", "eta": 1e-12},
        "steps": 1000,
        "stop": {"window": 5, "tol": 1e-3}
    }))
    .unwrap();
    let log = harness::run(&cfg).unwrap();
    assert!(log.manifest.stopped_early);
    assert!(log.manifest.steps_completed < 1000);
}
