//! Drives every CLI subcommand over a small generated dataset: synthetic
//! shape PNGs with masks, a CSV manifest, and JSON configs.
//!
//! cargo run --release --example cli_pipeline [work_dir]

use serde_json::json;
use std::path::{Path, PathBuf};
use xrss::io::{save_png, DatasetManifest, ManifestRow, Split};
use xrss::pretrain::RunConfig;
use xrss::synth::shapes_dataset;
use xrss::GrayImage;

fn write_json(path: &Path, value: serde_json::Value) -> std::io::Result<PathBuf> {
    std::fs::write(path, serde_json::to_string_pretty(&value)?)?;
    Ok(path.to_path_buf())
}

fn xrss(cmd: &str, config: &Path, out: &Path) {
    let argv: [&std::ffi::OsStr; 6] = ["xrss".as_ref(), cmd.as_ref(), "--config".as_ref(), config.as_os_str(), "--out".as_ref(), out.as_os_str()];
    let code = xrss::cli::run(argv);
    assert_eq!(code, 0, "{cmd} failed");
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let work: PathBuf = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("xrss_pipeline"), Into::into);
    let images = work.join("images");
    std::fs::create_dir_all(&images)?;

    let mut manifest = DatasetManifest::default();
    for (i, (img, label)) in shapes_dataset(64, 64, 3).into_iter().enumerate() {
        // blocks of four hold one image per class
        let split = match (i / 4) % 8 {
            0 => Split::Val,
            1 => Split::Test,
            _ => Split::Train,
        };
        let name = format!("img{i:03}.png");
        save_png(&img, &images.join(&name), false)?;
        // foreground mask by thresholding between the style's intensity bands
        let mask = GrayImage::new(64, 64, img.pixels().iter().map(|&p| if p > 0.45 { 1.0 / 255.0 } else { 0.0 }).collect())?;
        let mask_name = format!("mask{i:03}.png");
        save_png(&mask, &images.join(&mask_name), false)?;
        let mut row = ManifestRow::new(format!("images/{name}"), split);
        row.labels = Some((0..4).map(|k| f64::from(k == label)).collect());
        row.mask = Some(format!("images/{mask_name}").into());
        row.sex = Some(if i % 2 == 0 { "F" } else { "M" }.into());
        row.age = Some(20.0 + (i * 7 % 60) as f64);
        manifest.rows.push(row);
    }
    let manifest_path = work.join("manifest.csv");
    manifest.save(&manifest_path)?;

    let mut run = RunConfig::desk();
    run.iterations = 40;
    run.warmup_iters = 10;
    run.checkpoint_every = 20;
    let cfg = work.join("configs");
    std::fs::create_dir_all(&cfg)?;
    let out = |s: &str| work.join("out").join(s);
    let classes = json!(["disk", "ring", "cross", "triangle"]);

    xrss("pretrain", &write_json(&cfg.join("pretrain.json"), json!({"manifest": manifest_path, "run": run}))?, &out("pretrain"));
    xrss(
        "extract-features",
        &write_json(&cfg.join("extract.json"), json!({"checkpoint": out("pretrain").join("checkpoint.bin"), "manifest": manifest_path}))?,
        &out("features"),
    );
    let features = out("features").join("features.bin");
    xrss(
        "train-adapter",
        &write_json(
            &cfg.join("adapter.json"),
            json!({"features": features, "manifest": manifest_path, "task": "multilabel", "pooling": "attentive", "grid": {"epochs": 2, "batch_size": 16, "momentum": 0.9}}),
        )?,
        &out("adapter"),
    );
    let adapter = out("adapter").join("adapter.bin");
    xrss(
        "evaluate",
        &write_json(
            &cfg.join("evaluate.json"),
            json!({"features": features, "manifest": manifest_path, "model": adapter, "classes": classes, "bootstrap": 200}),
        )?,
        &out("evaluate"),
    );
    xrss(
        "train-seg",
        &write_json(
            &cfg.join("seg.json"),
            json!({"features": features, "manifest": manifest_path, "classes": 2,
                   "seg": {"iterations": 60, "warmup_iters": 18, "batch_size": 16, "lrs": [0.01, 0.1], "momentum": 0.9}}),
        )?,
        &out("seg"),
    );
    xrss(
        "bias-audit",
        &write_json(
            &cfg.join("bias.json"),
            json!({"features": features, "manifest": manifest_path, "group_key": "sex", "folds": 4,
                   "spec": {"task": "multilabel", "pooling": "average", "depth": 1, "lr": 0.01, "wd": 0.0},
                   "grid": {"epochs": 2, "batch_size": 16, "momentum": 0.9}}),
        )?,
        &out("bias"),
    );
    let renamed = json!(["Disk", "Ring", "Cross", "Triangle"]);
    xrss(
        "transfer-eval",
        &write_json(
            &cfg.join("transfer.json"),
            json!({"model": adapter,
                   "internal": {"features": features, "manifest": manifest_path, "classes": classes},
                   "external": {"features": features, "manifest": manifest_path, "classes": renamed},
                   "mapping": {"Disk": "disk", "Ring": "ring", "Cross": "cross", "Triangle": "triangle"}}),
        )?,
        &out("transfer"),
    );
    xrss(
        "attention-maps",
        &write_json(&cfg.join("attention.json"), json!({"model": adapter, "features": features, "manifest": manifest_path, "findings": classes}))?,
        &out("attention"),
    );
    xrss("report", &write_json(&cfg.join("report.json"), json!({"input": out("bias")}))?, &out("report"));
    println!("all outputs under {}", work.join("out").display());
    Ok(())
}
