use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Whether weight decay applies to a parameter: biases and normalization
/// gains are exempt.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.contains("norm"))
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<f64> {
    let norm = grads.values().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.map(|v| v * f)?;
        }
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamW {
    pub fn new(params: &ParamStore, hyper: AdamHyper) -> Self {
        let zeros = |p: &ParamStore| {
            let mut s = ParamStore::new();
            for (k, t) in p.iter() {
                s.insert(k.clone(), Tensor::zeros(t.shape().to_vec()));
            }
            s
        };
        AdamW {
            hyper,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// One update. Parameters without a gradient entry are treated as
    /// having zero gradient (their moments still decay).
    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64, wd: f64) -> Result<()> {
        if !self.m.same_layout(params) {
            return Err(Error::ParamMismatch("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let m = self.m.get_mut(name).expect("layout checked");
            let mut md = m.data().to_vec();
            let v = self.v.get_mut(name).expect("layout checked");
            let mut vd = v.data().to_vec();
            let gd = grads.get(name).map(|g| g.data());
            let decay = if decays(name) { wd } else { 0.0 };
            let mut pd = p.data().to_vec();
            for i in 0..pd.len() {
                let gi = gd.map_or(0.0, |g| g[i]);
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                pd[i] = pd[i] - lr * (mh / (vh.sqrt() + eps)) - lr * decay * pd[i];
            }
            let shape = p.shape().to_vec();
            *m = Tensor::new(shape.clone(), md)?;
            *v = Tensor::new(shape.clone(), vd)?;
            *p = Tensor::new(shape, pd)?;
        }
        Ok(())
    }
}
