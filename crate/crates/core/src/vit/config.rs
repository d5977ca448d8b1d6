use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Named model sizes. `Small`/`Base`/`Large` follow the standard ViT-S/B/L
/// family; `Tiny` is a desk-scale preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Small,
    Base,
    Large,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            "base" => Ok(Preset::Base),
            "large" => Ok(Preset::Large),
            other => Err(Error::invalid(format!("unknown preset `{}`", other))),
        }
    }
}

/// Backbone hyper-parameters.
///
/// Inputs are single-channel: the patch projection maps `patch_size²` gray
/// values to `embed_dim`, with no replication to three channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub preset: Preset,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Side of the square grid the learned positional table is stored for.
    pub base_grid: usize,
    pub layernorm_eps: f64,
}

impl ViTConfig {
    pub fn preset(preset: Preset) -> Self {
        let (embed_dim, depth, heads, base_grid) = match preset {
            Preset::Tiny => (64, 4, 4, 4),
            Preset::Small => (384, 12, 6, 14),
            Preset::Base => (768, 12, 12, 14),
            Preset::Large => (1024, 24, 16, 14),
        };
        ViTConfig {
            preset,
            patch_size: 16,
            embed_dim,
            depth,
            heads,
            mlp_ratio: 4,
            base_grid,
            layernorm_eps: 1e-6,
        }
    }

    pub fn tiny() -> Self {
        Self::preset(Preset::Tiny)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.heads == 0 || self.base_grid == 0 {
            return Err(Error::invalid("ViT dimensions must be positive"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::invalid("mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Patch grid `(rows, cols)` for an image, or an error if the extents
    /// are not positive multiples of the patch size.
    pub fn grid_for(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        let p = self.patch_size;
        if width == 0 || height == 0 || width % p != 0 || height % p != 0 {
            return Err(Error::invalid(format!(
                "image {}x{} is not a positive multiple of patch size {}",
                width, height, p
            )));
        }
        Ok((height / p, width / p))
    }

    /// Number of learnable backbone scalars.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let p2 = self.patch_size * self.patch_size;
        let m = self.mlp_dim();
        let embed = p2 * d + d + d + (1 + self.base_grid * self.base_grid) * d + d;
        let block = 2 * 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * m + m) + (m * d + d);
        embed + self.depth * block + 2 * d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [Preset::Tiny, Preset::Small, Preset::Base, Preset::Large] {
            ViTConfig::preset(p).validate().unwrap();
        }
        let mut bad = ViTConfig::tiny();
        bad.heads = 5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn family_token_dims_and_sizes() {
        assert_eq!(ViTConfig::preset(Preset::Small).embed_dim, 384);
        assert_eq!(ViTConfig::preset(Preset::Base).embed_dim, 768);
        assert_eq!(ViTConfig::preset(Preset::Large).embed_dim, 1024);
        // Nominal 21M / 86M / 307M; one input channel and no classifier head
        // put the counts slightly below.
        let rel = |p, nominal: f64| (ViTConfig::preset(p).param_count() as f64 / 1e6 - nominal).abs() / nominal;
        assert!(rel(Preset::Small, 21.0) < 0.03);
        assert!(rel(Preset::Base, 86.0) < 0.02);
        assert!(rel(Preset::Large, 307.0) < 0.02);
    }

    #[test]
    fn grid_extents() {
        let cfg = ViTConfig::preset(Preset::Large);
        assert_eq!(cfg.grid_for(224, 224).unwrap(), (14, 14));
        assert_eq!(cfg.grid_for(512, 512).unwrap(), (32, 32));
        assert_eq!(cfg.grid_for(32, 32).unwrap(), (2, 2));
        assert!(cfg.grid_for(100, 224).is_err());
    }
}
