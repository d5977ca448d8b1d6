//! Builds a two-layer network on the tape, backpropagates a softmax
//! cross-entropy and compares every gradient with central differences.
//!
//! cargo run --example autodiff

use xrss::rng::stream;
use xrss::tensor::{finite_diff_check, GradCheck};
use xrss::params::trunc_normal;
use xrss::{Graph, Result, Tensor, Var};

/// Mean cross-entropy of a GELU MLP with layer norm on a fixed batch.
fn network(g: &mut Graph, w1: Var, x: &Tensor, w2: &Tensor, targets: &[usize]) -> Result<Var> {
    let x = g.constant(x.clone());
    let w2 = g.constant(w2.clone());
    let d = g.shape(w1)[1];
    let gain = g.constant(Tensor::full([d], 1.0));
    let bias = g.constant(Tensor::zeros([d]));
    let h = g.matmul(x, w1, false)?;
    let h = g.layernorm(h, gain, bias, 1e-6)?;
    let h = g.gelu(h)?;
    let logits = g.matmul(h, w2, false)?;
    let logp = g.log_softmax(logits, 1.0)?;
    let k = g.shape(logp)[1];
    let picked = g.gather(logp, targets.iter().enumerate().map(|(r, &t)| Some(r * k + t)).collect(), &[targets.len()])?;
    let mean = g.mean(picked)?;
    g.scale(mean, -1.0)
}

fn report(name: &str, c: &GradCheck) {
    println!("{:<28} {} coords, max rel err {:.2e}, {}", name, c.checked, c.max_rel_error, if c.passed { "ok" } else { "FAILED" });
}

fn main() -> std::result::Result<(), Box<dyn std::error::Error>> {
    let mut rng = stream(7, &[]);
    let x = trunc_normal(&mut rng, &[6, 5], 1.0);
    let w1 = trunc_normal(&mut rng, &[5, 8], 0.5);
    let w2 = trunc_normal(&mut rng, &[8, 3], 0.5);
    let targets = [0, 2, 1, 1, 0, 2];

    let mut g = Graph::new();
    let w = g.param(w1.clone());
    let loss = network(&mut g, w, &x, &w2, &targets)?;
    println!("loss {:.6} over {} tape nodes", g.value(loss).item()?, g.len());
    let grads = g.backward(loss)?;
    let dw = grads.get(w).expect("w1 is a parameter");
    println!("|dL/dw1| = {:.6}", dw.data().iter().map(|v| v * v).sum::<f64>().sqrt());

    let check = finite_diff_check(|g, w| network(g, w, &x, &w2, &targets), &w1, 1e-5, 1e-4)?;
    report("mlp first layer", &check);

    // elementwise pieces on their own
    let probe = Tensor::from_fn([3, 4], |i| (i as f64 * 0.37).sin() + 1.5)?;
    let ops: [(&str, fn(&mut Graph, Var) -> Result<Var>); 4] = [
        ("log of softmax(T = 0.5)", |g, v| {
            let s = g.softmax(v, 0.5)?;
            let l = g.log(s)?;
            g.sum(l)
        }),
        ("powf 1.5 then mean", |g, v| {
            let p = g.powf(v, 1.5)?;
            g.mean(p)
        }),
        ("l2 rows then distances", |g, v| {
            let n = g.l2_normalize(v)?;
            let a = g.slice(n, 0, 0, 2)?;
            let b = g.slice(n, 0, 1, 2)?;
            let d = g.row_distance(a, b)?;
            g.sum(d)
        }),
        ("transpose matmul", |g, v| {
            let t = g.transpose(v)?;
            let m = g.matmul(v, t, false)?;
            g.mean(m)
        }),
    ];
    for (name, f) in ops {
        report(name, &finite_diff_check(f, &probe, 1e-5, 1e-4)?);
    }
    Ok(())
}
