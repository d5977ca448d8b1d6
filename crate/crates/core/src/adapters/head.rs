use super::spec::{AdapterSpec, Pooling, TaskKind};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;

const INIT_STD: f64 = 0.02;

/// Attention pooling over the patch axis of `patches` `[B, P, D]` with one
/// learned query per head (`queries` `[H, D]`).
///
/// Returns the pooled vectors `[B, H, D]` and the attention weights
/// `[B, H, P]`, where `a[b, k] = softmax_p(q_k · x_p / √D)`.
pub fn attentive_pool_graph(g: &mut Graph, patches: Var, queries: Var) -> Result<(Var, Var)> {
    let (sp, sq) = (g.shape(patches).to_vec(), g.shape(queries).to_vec());
    if sp.len() != 3 || sq.len() != 2 || sp[2] != sq[1] || sp[1] == 0 {
        return Err(Error::shape("attentive_pool", format!("patches {:?}, queries {:?}", sp, sq)));
    }
    let scores = g.matmul(patches, queries, true)?;
    let scores = g.permute(scores, &[0, 2, 1])?;
    let attn = g.softmax(scores, (sp[2] as f64).sqrt())?;
    let pooled = g.bmm(attn, patches, false)?;
    Ok((pooled, attn))
}

/// Pooled vectors and attention maps for one token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Pooled {
    /// `[H, D]`.
    pub vectors: Tensor,
    /// `[H, rows, cols]`, each map summing to one.
    pub maps: Tensor,
}

/// Attention pooling of a `[rows, cols, D]` token grid.
pub fn attentive_pool(tokens: &Tensor, queries: &Tensor) -> Result<Pooled> {
    let s = tokens.shape();
    if s.len() != 3 {
        return Err(Error::shape("attentive_pool", format!("token grid {:?}", s)));
    }
    let (rows, cols, d) = (s[0], s[1], s[2]);
    let mut g = Graph::new();
    let p = g.constant(tokens.reshape([1, rows * cols, d])?);
    let q = g.constant(queries.clone());
    let (pooled, attn) = attentive_pool_graph(&mut g, p, q)?;
    let h = queries.shape()[0];
    Ok(Pooled {
        vectors: g.value(pooled).reshape([h, d])?,
        maps: g.value(attn).reshape([h, rows, cols])?,
    })
}

/// Pooling plus a linear layer or a one-hidden-layer GELU MLP.
///
/// Parameter names: `query` `[H, D]` (attentive only), `fc1.weight`
/// `[in, hidden]`, `fc1.bias`, and for depth 2 `fc2.weight`, `fc2.bias`.
/// `in` is `H·D` for attentive pooling and `D` for average pooling; the
/// hidden width equals `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterHead {
    pub spec: AdapterSpec,
    pub dim: usize,
    pub outputs: usize,
}

pub struct HeadOutput {
    /// `[B, outputs]`.
    pub outputs: Var,
    /// `[B, H, P]` for attentive pooling.
    pub attention: Option<Var>,
}

impl AdapterHead {
    pub fn new(spec: AdapterSpec, dim: usize, outputs: usize) -> Result<Self> {
        spec.validate()?;
        if spec.task == TaskKind::Segmentation {
            return Err(Error::invalid("segmentation specs use the segmentation decoder"));
        }
        if dim == 0 || outputs == 0 {
            return Err(Error::invalid("adapter head needs positive dim and outputs"));
        }
        Ok(AdapterHead { spec, dim, outputs })
    }

    fn pooled_width(&self) -> usize {
        match self.spec.pooling {
            Pooling::Attentive { heads } => heads * self.dim,
            Pooling::Average => self.dim,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut p = ParamStore::new();
        if let Pooling::Attentive { heads } = self.spec.pooling {
            p.insert("query", trunc_normal(rng, &[heads, self.dim], INIT_STD));
        }
        let width = self.pooled_width();
        let first_out = if self.spec.depth == 2 { self.dim } else { self.outputs };
        p.insert("fc1.weight", trunc_normal(rng, &[width, first_out], INIT_STD));
        p.insert("fc1.bias", Tensor::zeros([first_out]));
        if self.spec.depth == 2 {
            p.insert("fc2.weight", trunc_normal(rng, &[self.dim, self.outputs], INIT_STD));
            p.insert("fc2.bias", Tensor::zeros([self.outputs]));
        }
        p
    }

    /// Forward pass over `patches` `[B, P, D]`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, patches: Var) -> Result<HeadOutput> {
        let s = g.shape(patches).to_vec();
        if s.len() != 3 || s[2] != self.dim || s[1] == 0 {
            return Err(Error::shape("adapter_head", format!("tokens {:?}, dim {}", s, self.dim)));
        }
        let b = s[0];
        let (x, attention) = match self.spec.pooling {
            Pooling::Attentive { heads } => {
                let (pooled, attn) = attentive_pool_graph(g, patches, bound.get("query")?)?;
                (g.reshape(pooled, &[b, heads * self.dim])?, Some(attn))
            }
            Pooling::Average => (g.mean_axis(patches, 1)?, None),
        };
        let w1 = bound.get("fc1.weight")?;
        let b1 = bound.get("fc1.bias")?;
        let mut y = g.matmul(x, w1, false)?;
        y = g.add(y, b1)?;
        if self.spec.depth == 2 {
            y = g.gelu(y)?;
            let w2 = bound.get("fc2.weight")?;
            let b2 = bound.get("fc2.bias")?;
            y = g.matmul(y, w2, false)?;
            y = g.add(y, b2)?;
        }
        Ok(HeadOutput { outputs: y, attention })
    }
}

fn check_targets(task: TaskKind, outputs: &[usize], targets: &Tensor) -> Result<()> {
    if outputs != targets.shape() {
        return Err(Error::shape("task_loss", format!("outputs {:?} vs targets {:?}", outputs, targets.shape())));
    }
    match task {
        TaskKind::Multilabel | TaskKind::Multiclass | TaskKind::Segmentation => {
            if targets.data().iter().any(|&t| t != 0.0 && t != 1.0) {
                return Err(Error::invalid("classification targets must be 0 or 1"));
            }
            if task != TaskKind::Multilabel && targets.rank() == 2 {
                let c = targets.shape()[1];
                if targets.data().chunks(c).any(|r| r.iter().sum::<f64>() != 1.0) {
                    return Err(Error::invalid("each target row must be one-hot"));
                }
            }
        }
        TaskKind::Regression => {
            if targets.data().iter().any(|t| !t.is_finite()) {
                return Err(Error::NonFinite { op: "task_loss" });
            }
        }
    }
    Ok(())
}

/// Smoothing constant of the soft Dice loss.
pub const DICE_EPS: f64 = 1.0;

/// Training loss for `outputs` `[N, C]` against `targets` of the same shape.
///
/// - multilabel: mean binary cross-entropy on logits over all entries;
/// - multiclass: softmax cross-entropy against one-hot rows, mean over N;
/// - regression: SMAPE, mean of `|p−g| / ((|p|+|g|)/2 + 1e-8)`;
/// - segmentation: per-pixel class scores; `1 − (2Σpg + 1)/(Σp + Σg + 1)`
///   with `p` the class softmax, averaged over classes.
pub fn task_loss(g: &mut Graph, task: TaskKind, outputs: Var, targets: &Tensor) -> Result<Var> {
    let shape = g.shape(outputs).to_vec();
    check_targets(task, &shape, targets)?;
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::shape("task_loss", format!("outputs {:?}", shape)));
    }
    let (n, c) = (shape[0], shape[1]);
    match task {
        TaskKind::Multilabel => {
            let z = g.reshape(outputs, &[n, c, 1])?;
            let zero = g.constant(Tensor::zeros([n, c, 1]));
            let pair = g.concat(&[zero, z], 2)?;
            let ls = g.log_softmax(pair, 1.0)?;
            let mut both = Vec::with_capacity(2 * n * c);
            for &t in targets.data() {
                both.push(1.0 - t);
                both.push(t);
            }
            let tt = g.constant(Tensor::new([n, c, 2], both)?);
            let prod = g.mul(ls, tt)?;
            let s = g.sum(prod)?;
            g.scale(s, -1.0 / (n * c) as f64)
        }
        TaskKind::Multiclass => {
            let ls = g.log_softmax(outputs, 1.0)?;
            let tt = g.constant(targets.clone());
            let prod = g.mul(ls, tt)?;
            let s = g.sum(prod)?;
            g.scale(s, -1.0 / n as f64)
        }
        TaskKind::Regression => {
            let tt = g.constant(targets.clone());
            let diff = g.sub(outputs, tt)?;
            let num = g.abs(diff)?;
            let ap = g.abs(outputs)?;
            let ag = g.constant(targets.map(f64::abs)?);
            let den = g.add(ap, ag)?;
            let den = g.scale(den, 0.5)?;
            let den = g.add_scalar(den, crate::metrics::SMAPE_EPS)?;
            let inv = g.powf(den, -1.0)?;
            let ratio = g.mul(num, inv)?;
            g.mean(ratio)
        }
        TaskKind::Segmentation => {
            let p = g.softmax(outputs, 1.0)?;
            let tt = g.constant(targets.clone());
            let pg = g.mul(p, tt)?;
            let inter = g.sum_axis(pg, 0)?;
            let sp = g.sum_axis(p, 0)?;
            let mut sg = vec![0.0; c];
            for row in targets.data().chunks(c) {
                sg.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            }
            let sg = g.constant(Tensor::new([c], sg)?);
            let num = g.scale(inter, 2.0)?;
            let num = g.add_scalar(num, DICE_EPS)?;
            let den = g.add(sp, sg)?;
            let den = g.add_scalar(den, DICE_EPS)?;
            let inv = g.powf(den, -1.0)?;
            let dice = g.mul(num, inv)?;
            let m = g.mean(dice)?;
            let neg = g.scale(m, -1.0)?;
            g.add_scalar(neg, 1.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn spec(pooling: Pooling, depth: usize) -> AdapterSpec {
        AdapterSpec { task: TaskKind::Multilabel, pooling, depth, lr: 1e-3, wd: 0.0 }
    }

    #[test]
    fn identical_tokens_give_uniform_attention() {
        let tokens = Tensor::from_fn([3, 4, 5], |i| (i % 5) as f64).unwrap();
        let q = Tensor::from_fn([2, 5], |i| i as f64 * 0.3).unwrap();
        let out = attentive_pool(&tokens, &q).unwrap();
        assert!(out.maps.data().iter().all(|&a| (a - 1.0 / 12.0).abs() < 1e-15));
        assert!((out.vectors.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_linear_head_returns_bias() {
        let head = AdapterHead::new(spec(Pooling::Average, 1), 4, 3).unwrap();
        let mut p = head.init(&mut stream(0, &[]));
        p.insert("fc1.weight", Tensor::zeros([4, 3]));
        p.insert("fc1.bias", Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let x = g.constant(Tensor::from_fn([2, 6, 4], |i| i as f64).unwrap());
        let out = head.forward(&mut g, &bound, x).unwrap();
        assert_eq!(g.value(out.outputs).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn loss_identities() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros([1, 1]));
        let l = task_loss(&mut g, TaskKind::Multilabel, z, &Tensor::full([1, 1], 1.0)).unwrap();
        assert!((g.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-15);

        let p = g.constant(Tensor::new([1, 2], vec![3.0, -2.0]).unwrap());
        let l = task_loss(&mut g, TaskKind::Regression, p, &Tensor::new([1, 2], vec![3.0, -2.0]).unwrap()).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);

        let logits = g.constant(Tensor::new([2, 2], vec![40.0, -40.0, -40.0, 40.0]).unwrap());
        let gt = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = task_loss(&mut g, TaskKind::Segmentation, logits, &gt).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-12);

        let bad = Tensor::new([2, 2], vec![0.5, 0.5, 0.0, 1.0]).unwrap();
        assert!(task_loss(&mut g, TaskKind::Multiclass, logits, &bad).is_err());
    }
}
