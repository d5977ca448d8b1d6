use crate::error::{Error, Result};
use crate::params::{trunc_normal, Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Projection head sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub prototypes: usize,
}

impl HeadConfig {
    /// Hidden width `4·embed_dim`, bottleneck `embed_dim`, `prototypes` outputs.
    pub fn for_embed(embed_dim: usize, prototypes: usize) -> Self {
        HeadConfig {
            hidden: 4 * embed_dim,
            bottleneck: embed_dim,
            prototypes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.bottleneck == 0 || self.prototypes == 0 {
            return Err(Error::invalid("head sizes must be positive"));
        }
        Ok(())
    }
}

/// Three-layer MLP, L2-normalized bottleneck, then a weight-normalized
/// linear map onto the prototypes. Parameters live under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub prefix: String,
    pub input: usize,
    pub cfg: HeadConfig,
}

impl ProjectionHead {
    pub fn new(prefix: impl Into<String>, input: usize, cfg: HeadConfig) -> Result<Self> {
        cfg.validate()?;
        let mut prefix = prefix.into();
        if !prefix.ends_with('.') {
            prefix.push('.');
        }
        Ok(ProjectionHead { prefix, input, cfg })
    }

    fn key(&self, rest: &str) -> String {
        format!("{}{}", self.prefix, rest)
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let c = &self.cfg;
        let mut s = ParamStore::new();
        let dims = [(self.input, c.hidden), (c.hidden, c.hidden), (c.hidden, c.bottleneck)];
        for (i, &(a, b)) in dims.iter().enumerate() {
            s.insert(self.key(&format!("mlp.{}.weight", i)), trunc_normal(rng, &[a, b], 0.02));
            s.insert(self.key(&format!("mlp.{}.bias", i)), Tensor::zeros([b]));
        }
        s.insert(self.key("last.weight_v"), trunc_normal(rng, &[c.prototypes, c.bottleneck], 0.02));
        s
    }

    /// Rows of `x` (`[n, input]`) to unit-norm bottleneck features `[n, bottleneck]`.
    pub fn bottleneck(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..3 {
            let w = bound.get(&self.key(&format!("mlp.{}.weight", i)))?;
            let b = bound.get(&self.key(&format!("mlp.{}.bias", i)))?;
            h = g.matmul(h, w, false)?;
            h = g.add(h, b)?;
            if i < 2 {
                h = g.gelu(h)?;
            }
        }
        g.l2_normalize(h)
    }

    /// Prototype logits `[n, prototypes]`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let z = self.bottleneck(g, bound, x)?;
        let v = bound.get(&self.key("last.weight_v"))?;
        let w = g.l2_normalize(v)?;
        g.matmul(z, w, true)
    }
}
