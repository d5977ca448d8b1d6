use serde_json::json;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use xrss::io::{save_png, DatasetManifest, ManifestRow, Split};
use xrss::pretrain::RunConfig;
use xrss::synth::shapes_dataset;

fn xrss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xrss")).args(args).env("RUST_LOG", "error").output().unwrap()
}

fn run(cmd: &str, dir: &Path, name: &str, config: serde_json::Value) -> Output {
    let cfg = dir.join(format!("{name}.json"));
    std::fs::write(&cfg, config.to_string()).unwrap();
    let out = dir.join(name);
    xrss(&[cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn ok(out: Output) -> String {
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

/// Writes 32 labelled shape images and a CSV manifest, then pretrains for a
/// few iterations and extracts features.
fn fixture(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let mut manifest = DatasetManifest::default();
    for (i, (img, label)) in shapes_dataset(32, 64, 5).into_iter().enumerate() {
        let path = dir.join(format!("img{i:02}.png"));
        save_png(&img, &path, false).unwrap();
        let split = match (i / 4) % 4 {
            0 => Split::Val,
            1 => Split::Test,
            _ => Split::Train,
        };
        let mut row = ManifestRow::new(path, split);
        row.labels = Some((0..4).map(|k| f64::from(k == label)).collect());
        row.sex = Some(["F", "M"][i % 2].into());
        manifest.rows.push(row);
    }
    let manifest_path = dir.join("manifest.csv");
    manifest.save(&manifest_path).unwrap();

    let mut cfg = RunConfig::desk();
    cfg.augment.n_local = 2;
    cfg.iterations = 3;
    cfg.warmup_iters = 1;
    cfg.prototypes = 64;
    cfg.checkpoint_every = 0;
    ok(run("pretrain", dir, "pretrain", json!({"manifest": manifest_path, "run": cfg})));
    let checkpoint = dir.join("pretrain").join("checkpoint.bin");
    ok(run("extract-features", dir, "features", json!({"checkpoint": checkpoint, "manifest": manifest_path})));
    (manifest_path, checkpoint, dir.join("features").join("features.bin"))
}

#[test]
fn adapter_training_and_evaluation_write_metric_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (manifest, checkpoint, features) = fixture(dir);
    let before = sha(&checkpoint);

    let grid = json!({"epochs": 2, "batch_size": 8, "momentum": 0.9});
    ok(run(
        "train-adapter",
        dir,
        "adapter",
        json!({"features": features, "manifest": manifest, "task": "multiclass", "pooling": "average", "grid": grid}),
    ));
    assert_eq!(sha(&checkpoint), before, "adapter training touched the backbone checkpoint");
    assert!(dir.join("adapter").join("grid.csv").exists());

    let model = dir.join("adapter").join("adapter.bin");
    let stdout = ok(run(
        "evaluate",
        dir,
        "evaluate",
        json!({"features": features, "manifest": manifest, "model": model, "bootstrap": 50}),
    ));
    assert!(stdout.starts_with("evaluate:"));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("evaluate").join("metrics.json")).unwrap()).unwrap();
    assert!(!metrics.as_array().unwrap().is_empty());
    let csv = std::fs::read_to_string(dir.join("evaluate").join("metrics.csv")).unwrap();
    assert!(csv.lines().count() >= 2);

    let printed = ok(run("report", dir, "report", json!({"input": dir.join("evaluate")})));
    assert!(printed.contains(csv.lines().next().unwrap()));

    ok(run(
        "bias-audit",
        dir,
        "bias",
        json!({"features": features, "manifest": manifest, "group_key": "sex", "folds": 3, "task": "multiclass",
               "spec": {"task": "multiclass", "pooling": "average", "depth": 1, "lr": 0.01, "wd": 0.0}, "grid": grid}),
    ));
    let matrix = ok(run("report", dir, "bias_report", json!({"input": dir.join("bias")})));
    assert!(matrix.contains('F') && matrix.contains('M'), "{matrix}");
    assert_eq!(sha(&checkpoint), before);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(xrss(&[]).status.code(), Some(1));
    assert_eq!(xrss(&["no-such-command"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let out = run("evaluate", tmp.path(), "bad", json!({"features": "x", "unexpected": 1}));
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(xrss(&["--help"]).status.code(), Some(0));
}

#[test]
fn corrupt_feature_cache_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (manifest, _, features) = fixture(dir);
    let mut bytes = std::fs::read(&features).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&features, bytes).unwrap();
    let out = run(
        "train-adapter",
        dir,
        "adapter",
        json!({"features": features, "manifest": manifest, "task": "multiclass"}),
    );
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}
