//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

pub mod losses;
pub mod metrics;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use xrss::adapters::{task_loss, AdapterHead, AdapterSpec, Pooling, SegDecoder, TaskKind};
use xrss::rng::stream;
use xrss::ssl::{dino_loss, ibot_loss, koleo_loss, HeadConfig, MaskPlan, ProjectionHead, Temperatures};
use xrss::tensor::{finite_diff_check, finite_diff_check_coords, GradCheck, RowMix};
use xrss::vit::{forward_batch, init_backbone, ViTConfig};
use xrss::{GrayImage, Graph, ParamStore, Result, Tensor, Var};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

type Checks = Vec<(&'static str, GradCheck)>;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, &[0x9c]);
    let normal = Normal::new(0.0, 1.0).unwrap();
    Tensor::from_fn(shape.to_vec(), |_| normal.sample(&mut rng)).unwrap()
}

/// Weighted sum with fixed pseudo-random weights, so symmetric errors in a
/// backward rule cannot cancel.
fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let w = g.constant(rand_tensor(g.shape(y), 0xfeed));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check(out: &mut Checks, name: &'static str, x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    let r = finite_diff_check(|g, v| f(g, v).and_then(|y| project(g, y)), x, H, TOL).unwrap();
    out.push((name, r));
}

/// Finite-difference result for every differentiable operation.
pub fn op_checks() -> Checks {
    let mut out = Vec::new();
    elementwise_and_reductions(&mut out);
    linear_algebra_and_layout(&mut out);
    normalizations_and_softmaxes(&mut out);
    indexing_ops(&mut out);
    out
}

fn elementwise_and_reductions(out: &mut Checks) {
    let x = rand_tensor(&[3, 4], 1);
    let other = rand_tensor(&[3, 4], 2);
    let row = rand_tensor(&[4], 3);
    check(out, "add", &x, |g, v| {
        let b = g.constant(row.clone());
        g.add(v, b)
    });
    check(out, "add (broadcast operand)", &row, |g, v| {
        let a = g.constant(x.clone());
        g.add(a, v)
    });
    check(out, "sub", &x, |g, v| {
        let b = g.constant(other.clone());
        let l = g.sub(v, b)?;
        let r = g.sub(b, v)?;
        g.mul(l, r)
    });
    check(out, "mul", &x, |g, v| {
        let b = g.constant(other.clone());
        let y = g.mul(v, b)?;
        g.mul(y, v)
    });
    check(out, "mul (broadcast operand)", &row, |g, v| {
        let a = g.constant(x.clone());
        g.mul(a, v)
    });
    check(out, "scale/add_scalar", &x, |g, v| {
        let y = g.scale(v, -2.5)?;
        g.add_scalar(y, 0.75)
    });
    check(out, "exp", &x, |g, v| g.exp(v));
    let positive = Tensor::from_fn([3, 4], |i| 0.5 + i as f64 * 0.3).unwrap();
    check(out, "log", &positive, |g, v| g.log(v));
    check(out, "powf", &positive, |g, v| g.powf(v, 1.7));
    let away = Tensor::from_fn([3, 4], |i| if i % 2 == 0 { 0.4 + i as f64 } else { -0.3 - i as f64 }).unwrap();
    check(out, "abs", &away, |g, v| g.abs(v));
    check(out, "gelu", &x, |g, v| g.gelu(v));
    check(out, "sum", &x, |g, v| {
        let s = g.sum(v)?;
        g.mul(s, s)
    });
    check(out, "mean", &x, |g, v| {
        let s = g.mean(v)?;
        g.exp(s)
    });
    let cube = rand_tensor(&[2, 3, 4], 4);
    for axis in 0..3 {
        check(out, "sum_axis", &cube, |g, v| {
            let s = g.sum_axis(v, axis)?;
            g.mul(s, s)
        });
        check(out, "mean_axis", &cube, |g, v| {
            let s = g.mean_axis(v, axis)?;
            g.mul(s, s)
        });
    }
}

fn linear_algebra_and_layout(out: &mut Checks) {
    let a = rand_tensor(&[2, 3, 4], 5);
    let w = rand_tensor(&[4, 5], 6);
    let wt = rand_tensor(&[5, 4], 7);
    check(out, "matmul lhs", &a, |g, v| {
        let b = g.constant(w.clone());
        g.matmul(v, b, false)
    });
    check(out, "matmul rhs", &w, |g, v| {
        let x = g.constant(a.clone());
        g.matmul(x, v, false)
    });
    check(out, "matmul rhs transposed", &wt, |g, v| {
        let x = g.constant(a.clone());
        g.matmul(x, v, true)
    });
    let b = rand_tensor(&[2, 4, 3], 8);
    check(out, "bmm lhs", &a, |g, v| {
        let y = g.constant(b.clone());
        g.bmm(v, y, false)
    });
    check(out, "bmm rhs", &b, |g, v| {
        let x = g.constant(a.clone());
        g.bmm(x, v, false)
    });
    check(out, "bmm self transposed", &a, |g, v| g.bmm(v, v, true));
    check(out, "concat", &a, |g, v| {
        let c = g.constant(rand_tensor(&[2, 1, 4], 9));
        let y = g.concat(&[v, c, v], 1)?;
        g.mul(y, y)
    });
    check(out, "slice", &a, |g, v| {
        let s = g.slice(v, 2, 1, 2)?;
        g.exp(s)
    });
    check(out, "reshape", &a, |g, v| {
        let r = g.reshape(v, &[6, 4])?;
        let b = g.constant(w.clone());
        g.matmul(r, b, false)
    });
    check(out, "permute", &a, |g, v| {
        let p = g.permute(v, &[2, 0, 1])?;
        let c = g.constant(rand_tensor(&[4, 2, 3], 10));
        g.mul(p, c)
    });
    let m = rand_tensor(&[3, 5], 11);
    check(out, "transpose", &m, |g, v| {
        let t = g.transpose(v)?;
        g.matmul(t, v, false)
    });
}

fn normalizations_and_softmaxes(out: &mut Checks) {
    let x = rand_tensor(&[3, 6], 12);
    check(out, "softmax", &x, |g, v| g.softmax(v, 0.7));
    let cube = rand_tensor(&[2, 3, 4], 13);
    for axis in 0..3 {
        check(out, "softmax_axis", &cube, |g, v| g.softmax_axis(v, axis, 1.3));
    }
    check(out, "log_softmax", &x, |g, v| g.log_softmax(v, 0.1));
    let gain = rand_tensor(&[6], 14);
    let bias = rand_tensor(&[6], 15);
    check(out, "layernorm input", &x, |g, v| {
        let (a, b) = (g.constant(gain.clone()), g.constant(bias.clone()));
        g.layernorm(v, a, b, 1e-6)
    });
    check(out, "layernorm gain", &gain, |g, v| {
        let (a, b) = (g.constant(x.clone()), g.constant(bias.clone()));
        g.layernorm(a, v, b, 1e-6)
    });
    check(out, "layernorm bias", &bias, |g, v| {
        let (a, b) = (g.constant(x.clone()), g.constant(gain.clone()));
        g.layernorm(a, b, v, 1e-6)
    });
    check(out, "l2_normalize", &x, |g, v| g.l2_normalize(v));
}

fn indexing_ops(out: &mut Checks) {
    let x = rand_tensor(&[4, 3], 16);
    check(out, "select_rows", &x, |g, v| {
        let s = g.select_rows(v, &[2, 0, 2])?;
        g.mul(s, s)
    });
    check(out, "gather", &x, |g, v| {
        let idx = vec![Some(11), None, Some(0), Some(5), Some(5), None];
        let y = g.gather(v, idx, &[2, 3])?;
        g.exp(y)
    });
    let y = rand_tensor(&[4, 3], 17);
    check(out, "row_distance", &x, |g, v| {
        let b = g.constant(y.clone());
        g.row_distance(v, b)
    });
    check(out, "mix_rows", &x, |g, v| {
        let mix = vec![
            RowMix { anchor: 1, terms: vec![(0, 0.25), (2, -0.5), (3, 1.25)] },
            RowMix { anchor: 3, terms: vec![] },
            RowMix { anchor: 0, terms: vec![(0, 0.3), (1, 0.7)] },
        ];
        let m = g.mix_rows(v, mix)?;
        g.mul(m, m)
    });
}

/// Parameters of a tiny encoder with both pretraining heads, an attentive
/// adapter and a segmentation decoder, perturbed away from their
/// initialization so biases, gains and the mask token are non-trivial.
pub fn composite() -> (ViTConfig, ParamStore, ProjectionHead, AdapterHead, SegDecoder) {
    let cfg = ViTConfig::tiny();
    let mut rng = stream(21, &[]);
    let mut params = init_backbone(&cfg, &mut rng).unwrap();
    let head = ProjectionHead::new("dino_head", cfg.embed_dim, HeadConfig::for_embed(cfg.embed_dim, 16)).unwrap();
    params.extend(head.init(&mut rng));
    let spec = AdapterSpec { task: TaskKind::Multilabel, pooling: Pooling::Attentive { heads: 2 }, depth: 2, lr: 0.1, wd: 0.0 };
    let adapter = AdapterHead::new(spec, cfg.embed_dim, 2).unwrap();
    let mut extra = adapter.init(&mut rng);
    let seg = SegDecoder::new(cfg.embed_dim, 2, (2, 2), (4, 4)).unwrap();
    let seg_params = seg.init(&mut rng);
    for (k, v) in seg_params.iter() {
        extra.insert(format!("seg.{}", k), v.clone());
    }
    for (k, v) in extra.iter() {
        params.insert(format!("adapter.{}", k), v.clone());
    }
    let normal = Normal::new(0.0, 0.1).unwrap();
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    (cfg, params, head, adapter, seg)
}

/// Scalar loss over the composite; `bound` may have one entry replaced by
/// the probed variable.
pub fn composite_loss(
    g: &mut Graph,
    bound: &xrss::params::Bound,
    cfg: &ViTConfig,
    head: &ProjectionHead,
    adapter: &AdapterHead,
    seg: &SegDecoder,
    images: &[GrayImage],
) -> Result<Var> {
    let refs: Vec<&GrayImage> = images.iter().collect();
    let masks = vec![vec![true, false, false, true], vec![false; 4]];
    let out = forward_batch(g, bound, cfg, &refs, Some(&masks), false)?;
    let logits = head.forward(g, bound, out.cls)?;
    let views: Vec<Var> = (0..2).map(|i| g.slice(logits, 0, i, 1)).collect::<Result<_>>()?;
    let teacher: Vec<Tensor> = (0..2).map(|i| rand_tensor(&[1, 16], 30 + i)).collect();
    let temps = Temperatures { student: 0.1, teacher: 0.07 };
    let center = vec![0.05; 16];
    let dino = dino_loss(g, &views, &teacher, &center, temps)?;
    let patch_logits = {
        let p0 = g.slice(out.patches, 0, 0, 1)?;
        let flat = g.reshape(p0, &[4, cfg.embed_dim])?;
        head.forward(g, bound, flat)?
    };
    let plan = MaskPlan { rows: 2, cols: 2, mask: masks[0].clone() };
    let (ibot, _) = ibot_loss(g, &[patch_logits], &[rand_tensor(&[4, 16], 40)], &[plan], &center, temps)?;
    let koleo = koleo_loss(g, out.cls)?;

    let adapter_bound = bound.strip_prefix("adapter.");
    let y = adapter.forward(g, &adapter_bound, out.patches)?;
    let targets = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0])?;
    let bce = task_loss(g, TaskKind::Multilabel, y.outputs, &targets)?;
    let seg_bound = bound.strip_prefix("adapter.seg.");
    let seg_out = seg.forward(g, &seg_bound, out.patches)?;
    let seg_targets = Tensor::from_fn([32, 2], |i| f64::from((i / 2 + i) % 3 == 0))?;
    let dice = task_loss(g, TaskKind::Segmentation, seg_out, &seg_targets)?;

    let mut total = g.add(dino, ibot)?;
    for term in [koleo, bce, dice] {
        total = g.add(total, term)?;
    }
    Ok(total)
}

pub struct CompositeCheck {
    pub checked: usize,
    pub tensors: usize,
    pub worst: f64,
    /// First parameter tensor whose sampled coordinates failed.
    pub failure: Option<String>,
}

/// Three coordinates of every parameter tensor of the composite.
pub fn composite_check() -> CompositeCheck {
    let (cfg, params, head, adapter, seg) = composite();
    // 32x32 inputs on a 4x4 positional table exercise the interpolation path
    let images: Vec<GrayImage> = (0..2)
        .map(|s| {
            let mut rng = stream(50 + s, &[]);
            GrayImage::from_fn(32, 32, |_, _| rng.gen::<f64>())
        })
        .collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut failure = None;
    for (name, value) in params.iter() {
        let n = value.numel();
        // key biases shift a whole attention row; their gradient is zero and
        // the difference quotient only measures roundoff
        let probe = if name.ends_with("qkv.bias") { [0, 2 * n / 3, n - 1] } else { [0, n / 3, n - 1] };
        let coords: Vec<usize> = probe.into_iter().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let r = finite_diff_check_coords(
            |g, v| {
                let mut bound = params.bind(g, false);
                bound.replace(name, v)?;
                composite_loss(g, &bound, &cfg, &head, &adapter, &seg, &images)
            },
            value,
            &coords,
            H,
            TOL,
        )
        .unwrap();
        if !r.passed && failure.is_none() {
            failure = Some(format!("{}: max relative error {:e} at {:?}", name, r.max_rel_error, r.worst_index));
        }
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
    }
    CompositeCheck { checked, tensors: params.len(), worst, failure }
}

pub fn softmax(row: &[f64], shift: &[f64], tau: f64) -> Vec<f64> {
    let z: Vec<f64> = row.iter().zip(shift).map(|(a, c)| (a - c) / tau).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
    z.iter().map(|v| (v - m).exp() / denom).collect()
}

pub fn cross_entropy(t_row: &[f64], s_row: &[f64], center: &[f64], temps: Temperatures) -> f64 {
    let p = softmax(t_row, center, temps.teacher);
    let zero = vec![0.0; s_row.len()];
    let q = softmax(s_row, &zero, temps.student);
    -p.iter().zip(&q).map(|(a, b)| a * b.ln()).sum::<f64>()
}

/// Doubled pair count so that ties stay integral.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice, mut pos, mut neg) = (0u64, 0u64, 0u64);
    for i in 0..scores.len() {
        if labels[i] {
            pos += 1;
        } else {
            neg += 1;
        }
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    twice as f64 / (2 * pos * neg) as f64
}

pub fn auprc_steps(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let (mut prev_recall, mut ap) = (0.0, 0.0);
    for t in thresholds {
        let above: Vec<bool> = scores.iter().zip(labels).filter(|(s, _)| **s >= t).map(|(_, &l)| l).collect();
        let tp = above.iter().filter(|&&l| l).count() as f64;
        let recall = tp / pos;
        ap += (recall - prev_recall) * tp / above.len() as f64;
        prev_recall = recall;
    }
    ap
}

pub fn u_pairs(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for x in a {
        for y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

pub fn mw_enumeration(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let mean = (a.len() * b.len()) as f64 / 2.0;
    let observed = (u_pairs(a, b) - mean).abs();
    let (mut extreme, mut total) = (0u64, 0u64);
    for bits in 0u32..1 << n {
        if bits.count_ones() as usize != a.len() {
            continue;
        }
        let (x, y): (Vec<(usize, f64)>, Vec<(usize, f64)>) =
            pooled.iter().copied().enumerate().partition(|(i, _)| bits >> i & 1 == 1);
        let x: Vec<f64> = x.into_iter().map(|p| p.1).collect();
        let y: Vec<f64> = y.into_iter().map(|p| p.1).collect();
        total += 1;
        if (u_pairs(&x, &y) - mean).abs() >= observed {
            extreme += 1;
        }
    }
    extreme as f64 / total as f64
}

pub fn mw_monte_carlo(a: &[f64], b: &[f64], permutations: usize, seed: u64) -> f64 {
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let mean = (a.len() * b.len()) as f64 / 2.0;
    let observed = (u_pairs(a, b) - mean).abs();
    let mut rng = stream(seed, &[]);
    let mut extreme = 0;
    for _ in 0..permutations {
        pooled.shuffle(&mut rng);
        let (x, y) = pooled.split_at(a.len());
        if (u_pairs(x, y) - mean).abs() >= observed {
            extreme += 1;
        }
    }
    extreme as f64 / permutations as f64
}
