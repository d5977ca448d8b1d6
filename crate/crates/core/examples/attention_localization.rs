//! Scores attention maps against bounding boxes: a map counts as a hit
//! when its peak patch overlaps a box of the same finding by at least half
//! a patch.
//!
//! cargo run --example attention_localization

use xrss::adapters::attentive_pool;
use xrss::audit::{argmax_patch, localization_accuracy, AttentionMap, BoxAnnotation};
use xrss::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // a 14x14 grid of 4-dim tokens; token (3, 9) matches the first query
    let (rows, cols, d) = (14, 14, 4);
    let tokens = Tensor::from_fn([rows, cols, d], |i| {
        let (p, c) = (i / d, i % d);
        if p == 3 * cols + 9 && c == 0 { 6.0 } else { 0.1 * ((i * 37 % 11) as f64 - 5.0) / 5.0 }
    })?;
    let queries = Tensor::new([2, d], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0])?;
    let pooled = attentive_pool(&tokens, &queries)?;
    let maps: Vec<AttentionMap> = ["effusion", "nodule"]
        .iter()
        .enumerate()
        .map(|(h, f)| AttentionMap {
            image_id: "img0".into(),
            finding: f.to_string(),
            map: Tensor::new([rows, cols], pooled.maps.data()[h * rows * cols..(h + 1) * rows * cols].to_vec()).unwrap(),
        })
        .collect();
    for m in &maps {
        println!("{}: peak patch {:?}", m.finding, argmax_patch(&m.map)?);
    }

    // 16-pixel patches: patch (3, 9) spans x 144..160, y 48..64
    let boxes = vec![
        BoxAnnotation { image_id: "img0".into(), finding: "effusion".into(), x: 152.0, y: 40.0, width: 30.0, height: 30.0 },
        BoxAnnotation { image_id: "img0".into(), finding: "nodule".into(), x: 0.0, y: 160.0, width: 20.0, height: 20.0 },
    ];
    let loc = localization_accuracy(&maps, &boxes, 16)?;
    for (f, a) in &loc.per_finding {
        println!("{f}: {}/{} hits", a.hits, a.total);
    }
    println!("macro localization accuracy {:.3}", loc.macro_accuracy);
    Ok(())
}
