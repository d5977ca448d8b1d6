//! Trains the segmentation decoder on synthetic patch features whose
//! channels encode the class of each image quadrant, then reports mDice.
//!
//! cargo run --release --example segmentation_decoder

use rand::Rng;
use xrss::adapters::{train_seg_decoder, FeatureSet, SegConfig, SegSet};
use xrss::rng::stream;
use xrss::Tensor;

/// 2x2 patch grid over 8x8 masks; each quadrant is background (0) or
/// foreground (1), written into channel 0 (with noise) of its token.
fn quadrants(n: usize, seed: u64) -> SegSet {
    let mut rng = stream(seed, &[]);
    let (grid, size, d) = ((2, 2), (8, 8), 4);
    let mut tokens = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..n {
        let fg: Vec<bool> = (0..4).map(|_| rng.gen_bool(0.5)).collect();
        for &f in &fg {
            tokens.push(if f { 1.0 } else { -1.0 } + rng.gen_range(-0.2..0.2));
            tokens.extend((1..d).map(|_| rng.gen_range(-1.0..1.0)));
        }
        masks.push((0..64).map(|i| usize::from(fg[(i / 8 / 4) * 2 + (i % 8) / 4])).collect());
    }
    let features = FeatureSet { cls: Tensor::zeros([n, d]), tokens: Tensor::new([n, 4, d], tokens).unwrap(), grid };
    SegSet::new(features, masks, size, 2).unwrap()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let train = quadrants(64, 1);
    let val = quadrants(32, 2);
    let test = quadrants(32, 3);
    // the protocol trains 5000 iterations; a shorter schedule suffices here
    let cfg = SegConfig { iterations: 300, warmup_iters: 90, lrs: vec![1e-3, 1e-2, 1e-1], ..SegConfig::default() };
    let search = train_seg_decoder(&train, &val, &cfg, 7)?;
    for (lr, dice) in &search.table {
        println!("lr {lr:<6} val mDice {dice:.4}");
    }
    println!("best lr {} test mDice {:.4}", search.best.lr, search.best.mdice(&test)?);
    Ok(())
}
