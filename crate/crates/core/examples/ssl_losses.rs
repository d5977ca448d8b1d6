//! Evaluates the three pretraining objectives on small hand-made inputs and
//! prints their gradients' norms.
//!
//! cargo run --example ssl_losses

use xrss::rng::stream;
use xrss::ssl::{dino_loss, ibot_loss, koleo_loss, mask_patches, MaskPlan, Temperatures};
use xrss::{Graph, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let k = 8;
    let temps = Temperatures { student: 0.1, teacher: 0.04 };
    let center = vec![0.0; k];

    // a uniform student against a uniform teacher sits exactly at log K
    let mut g = Graph::new();
    let s = g.param(Tensor::zeros([2, k]));
    let t = Tensor::zeros([2, k]);
    let loss = dino_loss(&mut g, &[s, s], &[t.clone(), t], &center, temps)?;
    println!("dino, uniform views: {:.6} (log K = {:.6})", g.value(loss).item()?, (k as f64).ln());

    // random logits
    let mut g = Graph::new();
    let student: Vec<_> = (0..4u64)
        .map(|v| g.param(Tensor::from_fn([2, k], |i| ((i as u64 * 7 + v * 3) % 11) as f64 / 5.0).unwrap()))
        .collect();
    let teacher: Vec<Tensor> = (0..2).map(|v| Tensor::from_fn([2, k], |i| ((i + v) % 5) as f64).unwrap()).collect();
    let loss = dino_loss(&mut g, &student, &teacher, &center, temps)?;
    let value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    let norm: f64 = grads.get(student[0]).map_or(0.0, |t| t.data().iter().map(|v| v * v).sum::<f64>().sqrt());
    println!("dino, 2 global + 2 local views: {:.6}, |grad| of view 0 = {:.6}", value, norm);

    // masked-patch objective on a 4x4 grid with a blockwise mask
    let plan = mask_patches(4, 4, 0.4, &mut stream(3, &[]))?;
    println!("mask covers {} of 16 patches: {:?}", plan.count(), plan.indices());
    let mut g = Graph::new();
    let s = g.param(Tensor::from_fn([16, k], |i| (i % 3) as f64)?);
    let t = Tensor::from_fn([16, k], |i| (i % 4) as f64)?;
    let (loss, status) = ibot_loss(&mut g, &[s], &[t.clone()], &[plan], &center, temps)?;
    println!("ibot: {:.6} ({:?})", g.value(loss).item()?, status);
    let mut g = Graph::new();
    let s = g.param(Tensor::zeros([16, k]));
    let (loss, status) = ibot_loss(&mut g, &[s], &[t], &[MaskPlan::empty(4, 4)], &center, temps)?;
    println!("ibot, empty mask: {} ({:?})", g.value(loss).item()?, status);

    // spreading term: two antipodal points are at distance 2
    let mut g = Graph::new();
    let x = g.param(Tensor::new([2, 3], vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0])?);
    let loss = koleo_loss(&mut g, x)?;
    println!("koleo, antipodal pair: {:.6} (-log 2 = {:.6})", g.value(loss).item()?, -(2f64).ln());
    Ok(())
}
