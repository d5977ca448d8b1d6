//! Grid-searches frozen-feature adapters on a synthetic token task, keeps
//! the best cell by validation AUROC, and round-trips it through a
//! checkpoint.
//!
//! cargo run --release --example adapter_grid [--full]

use rand::Rng;
use rand_distr::{Distribution, Normal};
use xrss::adapters::{
    classification_grid, grid_to_csv, one_hot, run_grid, FeatureSet, GridConfig, LabeledFeatures, TaskKind,
    TrainedAdapter,
};
use xrss::rng::stream;
use xrss::Tensor;

/// Three classes; class `k` adds a bump to channel `k` of one random patch.
fn tokens(n: usize, seed: u64) -> LabeledFeatures {
    let (p, d) = (9, 6);
    let mut rng = stream(seed, &[]);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut data = Vec::with_capacity(n * p * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % 3;
        let hot = rng.gen_range(0..p);
        for j in 0..p {
            for c in 0..d {
                let bump = if j == hot && c == k { 3.0 } else { 0.0 };
                data.push(normal.sample(&mut rng) * 0.5 + bump);
            }
        }
        labels.push(k);
    }
    let features = FeatureSet { cls: Tensor::zeros([n, d]), tokens: Tensor::new([n, p, d], data).unwrap(), grid: (3, 3) };
    LabeledFeatures::new(features, one_hot(&labels, 3).unwrap()).unwrap()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let full = std::env::args().any(|a| a == "--full");
    let train = tokens(240, 1);
    let val = tokens(90, 2);
    let mut cells = classification_grid(TaskKind::Multiclass, 3)?;
    println!("protocol grid: {} cells", cells.len());
    if !full {
        cells.retain(|c| c.lr >= 1e-2 && c.wd == 0.0);
        println!("searching the {} cells with lr >= 1e-2 and no weight decay (pass --full for all)", cells.len());
    }
    let cfg = GridConfig { epochs: 10, ..GridConfig::default() };
    let search = run_grid(&train, &val, &cells, &[0, 1], &cfg)?;
    let csv = grid_to_csv(&search.table)?;
    for line in csv.lines().take(6) {
        println!("{line}");
    }
    for best in &search.best {
        println!(
            "seed {}: best {} depth {} lr {} -> val {} {:.4}",
            best.seed, best.spec.pooling, best.spec.depth, best.spec.lr, search.metric, best.val_score
        );
    }

    let path = std::env::temp_dir().join("xrss_adapter.bin");
    search.best[0].save(&path)?;
    let back = TrainedAdapter::load(&path)?;
    assert_eq!(back.params, search.best[0].params);
    if let Some(maps) = back.attention_maps(&val.features)? {
        println!("attention maps {:?} written from {}", maps.shape(), path.display());
    }
    Ok(())
}
