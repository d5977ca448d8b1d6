//! Initializes the tiny backbone, encodes images at two resolutions, saves
//! and reloads a checkpoint, and writes a feature cache for a small folder
//! of images.
//!
//! cargo run --release --example vit_features [work_dir]

use std::path::PathBuf;
use xrss::io::{extract_features, save_png, DatasetManifest, FeatureCache, ManifestRow, Split};
use xrss::rng::stream;
use xrss::synth::shapes_dataset;
use xrss::vit::{encode, init_backbone, Checkpoint, Preset, ViTConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let work: PathBuf = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("xrss_vit"), Into::into);
    std::fs::create_dir_all(&work)?;

    for preset in [Preset::Tiny, Preset::Small, Preset::Base, Preset::Large] {
        let cfg = ViTConfig::preset(preset);
        println!("{:?}: dim {}, depth {}, heads {}, {} parameters", preset, cfg.embed_dim, cfg.depth, cfg.heads, cfg.param_count());
    }

    let cfg = ViTConfig::tiny();
    let params = init_backbone(&cfg, &mut stream(0, &[]))?;
    println!("tiny backbone holds {} tensors, {} values", params.len(), params.numel());

    // the position table is resampled to whatever grid the image needs
    let images = shapes_dataset(2, 96, 1);
    for size in [64, 96] {
        let img = images[0].0.crop(0, 0, size, size)?;
        let out = encode(&img, &cfg, &params)?;
        println!("{size}x{size} image -> CLS of {} values, patch grid {:?}", out.dim(), out.grid());
    }

    let ck = Checkpoint { meta: serde_json::json!({"preset": "tiny"}), params: params.clone() };
    let path = work.join("backbone.bin");
    ck.save(&path)?;
    let back = Checkpoint::load(&path)?;
    println!("checkpoint {} bytes, fingerprint {} -> {}", std::fs::metadata(&path)?.len(), params.fingerprint(), back.params.fingerprint());

    let mut manifest = DatasetManifest::default();
    for (i, (img, _)) in shapes_dataset(8, 64, 2).into_iter().enumerate() {
        let p = work.join(format!("img{i}.png"));
        save_png(&img, &p, false)?;
        manifest.rows.push(ManifestRow::new(p, Split::Test));
    }
    let cache = extract_features(&cfg, &back.params, &manifest, 64)?;
    let cache_path = work.join("features.bin");
    cache.save(&cache_path)?;
    let reloaded = FeatureCache::load(&cache_path)?;
    println!(
        "feature cache: {} records, CLS dim {}, grid {:?}, identical after reload: {}",
        reloaded.records.len(),
        reloaded.cls_dim,
        reloaded.grid,
        reloaded.to_bytes() == cache.to_bytes()
    );
    Ok(())
}
