use rand::Rng;
use std::path::Path;
use xrss::adapters::{
    attentive_pool, one_hot, run_grid, train_seg_decoder, AdapterSpec, FeatureSet, GridConfig, LabeledFeatures,
    Pooling, SegConfig, SegSet, TaskKind,
};
use xrss::audit::make_group_splits;
use xrss::io::{extract_features, save_png, DatasetManifest, FeatureCache, ManifestRow, RowBox, Split};
use xrss::pretrain::{pretrain_run, RunConfig, RunOptions, TrainState, CHECKPOINT_FILE};
use xrss::rng::stream;
use xrss::synth::shapes_dataset;
use xrss::vit::{init_backbone, Checkpoint, ViTConfig};
use xrss::Tensor;

fn short_run() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.iterations = 12;
    cfg.warmup_iters = 2;
    cfg.prototypes = 64;
    cfg.augment.n_local = 2;
    cfg.checkpoint_every = 0;
    cfg
}

#[test]
fn pretraining_is_reproducible_and_resumable() {
    let cfg = short_run();
    let images: Vec<_> = shapes_dataset(24, 64, 1).into_iter().map(|p| p.0).collect();
    let a = pretrain_run(&cfg, &images, RunOptions::default()).unwrap();
    let b = pretrain_run(&cfg, &images, RunOptions::default()).unwrap();
    assert_eq!(a.log.len(), 12);
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!(x.total.to_bits(), y.total.to_bits());
    }
    assert_eq!(a.state, b.state);

    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions { out_dir: Some(dir.path().to_path_buf()), stop_at: Some(2), ..RunOptions::default() };
    pretrain_run(&cfg, &images, opts).unwrap();
    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    let (saved_cfg, state) = TrainState::from_checkpoint(&ck).unwrap();
    assert_eq!(saved_cfg, cfg);
    assert_eq!(state.iter, 2);
    let resumed = pretrain_run(&cfg, &images, RunOptions { resume: Some(state), ..RunOptions::default() }).unwrap();
    assert_eq!(resumed.log.len(), 10);
    for (x, y) in resumed.log.iter().zip(&a.log[2..]) {
        assert_eq!(x, y);
        assert_eq!(x.total.to_bits(), y.total.to_bits());
    }
    assert_eq!(resumed.state, a.state);

    let bytes = a.state.to_checkpoint(&cfg).to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
}

#[test]
fn feature_caches_are_reproducible_and_written_atomically() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = DatasetManifest::default();
    for (i, (img, _)) in shapes_dataset(6, 48, 2).into_iter().enumerate() {
        let path = dir.path().join(format!("{i}.png"));
        save_png(&img, &path, i % 2 == 0).unwrap();
        manifest.rows.push(ManifestRow::new(path, Split::Train));
    }
    let cfg = ViTConfig::tiny();
    let params = init_backbone(&cfg, &mut stream(3, &[])).unwrap();
    let a = extract_features(&cfg, &params, &manifest, 48).unwrap();
    let b = extract_features(&cfg, &params, &manifest, 48).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(a.grid, (3, 3));
    let ids: Vec<String> = manifest.rows.iter().map(|r| r.id()).collect();
    assert_eq!(a.records.iter().map(|r| r.id.clone()).collect::<Vec<_>>(), ids);

    let path = dir.path().join("features.bin");
    a.save(&path).unwrap();
    assert_eq!(FeatureCache::load(&path).unwrap().to_bytes(), a.to_bytes());
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
    // a stale temporary from an interrupted write never shadows the cache
    std::fs::write(dir.path().join("features.bin.tmp"), b"XRSSFEAT\x01").unwrap();
    assert_eq!(FeatureCache::load(&path).unwrap().to_bytes(), a.to_bytes());
}

#[test]
fn manifests_round_trip_a_thousand_rows() {
    let mut rng = stream(4, &[]);
    let mut manifest = DatasetManifest::default();
    for i in 0..1000 {
        let split = [Split::Train, Split::Val, Split::Test][i % 3];
        let mut row = ManifestRow::new(format!("img/{i:04}.png"), split);
        if i % 5 != 0 {
            row.labels = Some((0..3).map(|_| f64::from(rng.gen_bool(0.3))).collect());
        }
        if i % 4 == 0 {
            row.mask = Some(format!("mask/{i:04}.png").into());
        }
        if i % 3 != 2 {
            row.sex = Some(["F", "M"][i % 2].into());
            row.age = Some(rng.gen_range(18.0..95.0));
        }
        manifest.rows.push(row);
    }
    let csv = manifest.to_csv_string().unwrap();
    let back = DatasetManifest::from_csv_str(&csv, Path::new("m.csv")).unwrap();
    assert_eq!(back, manifest);
    assert_eq!(back.to_csv_string().unwrap(), csv);

    for (i, row) in manifest.rows.iter_mut().enumerate().filter(|(i, _)| i % 7 == 0) {
        row.boxes.push(RowBox { finding: "nodule".into(), x: i as f64 * 0.5, y: 3.25, width: 10.0, height: 1e-3 });
    }
    let jsonl = manifest.to_jsonl_string().unwrap();
    let back = DatasetManifest::from_jsonl_str(&jsonl, Path::new("m.jsonl")).unwrap();
    assert_eq!(back, manifest);
    assert_eq!(back.to_jsonl_string().unwrap(), jsonl);
}

#[test]
fn attentive_pooling_matches_direct_formula_on_a_14x14_grid() {
    let mut rng = stream(5, &[]);
    let (rows, cols, d, heads) = (14, 14, 8, 3);
    let tokens = Tensor::from_fn([rows, cols, d], |_| rng.gen_range(-1.0..1.0)).unwrap();
    let queries = Tensor::from_fn([heads, d], |_| rng.gen_range(-2.0..2.0)).unwrap();
    let pooled = attentive_pool(&tokens, &queries).unwrap();
    let t = tokens.data();
    for h in 0..heads {
        let q = queries.row(h);
        let scores: Vec<f64> = (0..rows * cols)
            .map(|p| (0..d).map(|k| q[k] * t[p * d + k]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        let w: Vec<f64> = scores.iter().map(|s| (s - m).exp() / z).collect();
        let map = &pooled.maps.data()[h * rows * cols..(h + 1) * rows * cols];
        assert!((map.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in map.iter().zip(&w) {
            assert!((a - b).abs() < 1e-12);
        }
        for k in 0..d {
            let want: f64 = (0..rows * cols).map(|p| w[p] * t[p * d + k]).sum();
            assert!((pooled.vectors.data()[h * d + k] - want).abs() < 1e-12);
        }
    }
}

/// Masks on a 2x2 patch grid where channel 0 of each token decides its
/// quadrant's class.
fn quadrant_set(n: usize, seed: u64) -> SegSet {
    let mut rng = stream(seed, &[]);
    let d = 4;
    let mut tokens = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..n {
        let fg: Vec<bool> = (0..4).map(|_| rng.gen_bool(0.5)).collect();
        for &f in &fg {
            tokens.push(if f { 1.0 } else { -1.0 } + rng.gen_range(-0.2..0.2));
            tokens.extend((1..d).map(|_| rng.gen_range(-1.0..1.0)));
        }
        masks.push((0..64).map(|i| usize::from(fg[(i / 32) * 2 + (i % 8) / 4])).collect());
    }
    let features = FeatureSet { cls: Tensor::zeros([n, d]), tokens: Tensor::new([n, 4, d], tokens).unwrap(), grid: (2, 2) };
    SegSet::new(features, masks, (8, 8), 2).unwrap()
}

#[test]
fn segmentation_decoder_learns_a_separable_task() {
    let cfg = SegConfig { iterations: 300, warmup_iters: 90, lrs: vec![1e-2, 1e-1], ..SegConfig::default() };
    let search = train_seg_decoder(&quadrant_set(64, 1), &quadrant_set(32, 2), &cfg, 7).unwrap();
    let dice = search.best.mdice(&quadrant_set(32, 3)).unwrap();
    assert!(dice >= 0.95, "test mDice {}", dice);
    let again = train_seg_decoder(&quadrant_set(64, 1), &quadrant_set(32, 2), &cfg, 7).unwrap();
    assert_eq!(again.table, search.table);
}

fn cluster_set(n: usize, seed: u64) -> LabeledFeatures {
    let mut rng = stream(seed, &[]);
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let tokens = Tensor::from_fn([n, 4, 6], |i| {
        let (row, k) = (i / 24, i % 6);
        rng.gen_range(-1.0..1.0) + if k == labels[row] { 2.0 } else { 0.0 }
    })
    .unwrap();
    let features = FeatureSet { cls: Tensor::zeros([n, 6]), tokens, grid: (2, 2) };
    LabeledFeatures::new(features, one_hot(&labels, 3).unwrap()).unwrap()
}

#[test]
fn grid_search_is_reproducible_and_keeps_the_best_cell() {
    let cells: Vec<AdapterSpec> = [1e-3, 1e-2, 1e-1]
        .into_iter()
        .flat_map(|lr| {
            [Pooling::Average, Pooling::Attentive { heads: 2 }]
                .map(|pooling| AdapterSpec { task: TaskKind::Multiclass, pooling, depth: 1, lr, wd: 1e-4 })
        })
        .collect();
    let cfg = GridConfig { epochs: 3, batch_size: 16, momentum: 0.9 };
    let (train, val) = (cluster_set(60, 1), cluster_set(30, 2));
    let a = run_grid(&train, &val, &cells, &[0, 1], &cfg).unwrap();
    let b = run_grid(&train, &val, &cells, &[0, 1], &cfg).unwrap();
    assert_eq!(a.table, b.table);
    for (best, again) in a.best.iter().zip(&b.best) {
        assert_eq!(best.cell_id, again.cell_id);
        assert_eq!(best.params.fingerprint(), again.params.fingerprint());
        let seed_rows = a.table.iter().filter(|r| r.seed == best.seed);
        assert!(seed_rows.clone().count() == cells.len());
        assert!(seed_rows.map(|r| r.val_metric).all(|v| v <= best.val_score));
    }
}

#[test]
fn group_folds_are_reproducible() {
    let groups: Vec<String> = (0..90).map(|i| ["a", "b", "c"][i % 3].to_string()).collect();
    let a = make_group_splits(&groups, 20, Some(12), 9).unwrap();
    assert_eq!(a, make_group_splits(&groups, 20, Some(12), 9).unwrap());
    assert_ne!(a, make_group_splits(&groups, 20, Some(12), 10).unwrap());
    assert_eq!(a.folds.len(), 20);
}
