use super::config::ViTConfig;
use super::posembed::{base_grid_of, bicubic_mix};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::params::{trunc_normal, Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;

/// Name prefix of every backbone parameter.
pub const BACKBONE: &str = "backbone.";

const INIT_STD: f64 = 0.02;

fn name(rest: &str) -> String {
    format!("{}{}", BACKBONE, rest)
}

fn block_name(i: usize, rest: &str) -> String {
    format!("{}blocks.{}.{}", BACKBONE, i, rest)
}

/// Freshly initialized backbone parameters: truncated normal (σ = 0.02)
/// for projections and tokens, zero biases, unit normalization gains and a
/// zero mask token.
pub fn init_backbone<R: Rng + ?Sized>(cfg: &ViTConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let m = cfg.mlp_dim();
    let p2 = cfg.patch_size * cfg.patch_size;
    let n_pos = 1 + cfg.base_grid * cfg.base_grid;
    let mut s = ParamStore::new();
    s.insert(name("patch_embed.weight"), trunc_normal(rng, &[p2, d], INIT_STD));
    s.insert(name("patch_embed.bias"), Tensor::zeros([d]));
    s.insert(name("cls_token"), trunc_normal(rng, &[d], INIT_STD));
    s.insert(name("pos_embed"), trunc_normal(rng, &[n_pos, d], INIT_STD));
    s.insert(name("mask_token"), Tensor::zeros([d]));
    for i in 0..cfg.depth {
        s.insert(block_name(i, "norm1.weight"), Tensor::full([d], 1.0));
        s.insert(block_name(i, "norm1.bias"), Tensor::zeros([d]));
        s.insert(block_name(i, "attn.qkv.weight"), trunc_normal(rng, &[d, 3 * d], INIT_STD));
        s.insert(block_name(i, "attn.qkv.bias"), Tensor::zeros([3 * d]));
        s.insert(block_name(i, "attn.proj.weight"), trunc_normal(rng, &[d, d], INIT_STD));
        s.insert(block_name(i, "attn.proj.bias"), Tensor::zeros([d]));
        s.insert(block_name(i, "norm2.weight"), Tensor::full([d], 1.0));
        s.insert(block_name(i, "norm2.bias"), Tensor::zeros([d]));
        s.insert(block_name(i, "mlp.fc1.weight"), trunc_normal(rng, &[d, m], INIT_STD));
        s.insert(block_name(i, "mlp.fc1.bias"), Tensor::zeros([m]));
        s.insert(block_name(i, "mlp.fc2.weight"), trunc_normal(rng, &[m, d], INIT_STD));
        s.insert(block_name(i, "mlp.fc2.bias"), Tensor::zeros([d]));
    }
    s.insert(name("norm.weight"), Tensor::full([d], 1.0));
    s.insert(name("norm.bias"), Tensor::zeros([d]));
    Ok(s)
}

/// `x · w + b` over the last axis.
pub(crate) fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w, false)?;
    g.add(y, b)
}

/// Graph handles for one encoded batch.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    /// `[B, D]` class tokens after the final normalization.
    pub cls: Var,
    /// `[B, P, D]` patch tokens after the final normalization.
    pub patches: Var,
    /// Patch grid `(rows, cols)`.
    pub grid: (usize, usize),
    /// Per-block attention probabilities `[B·H, T, T]`, when requested.
    pub attention: Vec<Var>,
}

/// Flattens each image into `[P, p²]` patch rows (grid row-major, pixels
/// row-major within a patch).
pub fn patchify(images: &[&GrayImage], cfg: &ViTConfig) -> Result<(Tensor, (usize, usize))> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let (w, h) = (first.width(), first.height());
    let grid = cfg.grid_for(w, h)?;
    let p = cfg.patch_size;
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if img.width() != w || img.height() != h {
            return Err(Error::invalid("images in a batch must share extents"));
        }
        for gr in 0..grid.0 {
            for gc in 0..grid.1 {
                for y in 0..p {
                    let row = (gr * p + y) * w + gc * p;
                    data.extend_from_slice(&img.pixels()[row..row + p]);
                }
            }
        }
    }
    let n = images.len() * grid.0 * grid.1;
    Ok((Tensor::new([n, p * p], data)?, grid))
}

/// Runs the backbone on a batch of equally sized images.
///
/// `masks`, when given, holds one flag per patch (grid row-major) for every
/// image; flagged patch embeddings are replaced by the learned mask token
/// before positional embeddings are added.
pub fn forward_batch(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ViTConfig,
    images: &[&GrayImage],
    masks: Option<&[Vec<bool>]>,
    keep_attention: bool,
) -> Result<EncodedBatch> {
    let (patches, grid) = patchify(images, cfg)?;
    let b = images.len();
    let n_patch = grid.0 * grid.1;
    let d = cfg.embed_dim;

    let px = g.constant(patches);
    let x = linear(
        g,
        px,
        bound.get(&name("patch_embed.weight"))?,
        bound.get(&name("patch_embed.bias"))?,
    )?;
    let mut x = g.reshape(x, &[b, n_patch, d])?;

    if let Some(masks) = masks {
        if masks.len() != b || masks.iter().any(|m| m.len() != n_patch) {
            return Err(Error::shape("encoder", "mask plan does not match the batch"));
        }
        let mut keep = Vec::with_capacity(b * n_patch * d);
        for m in masks {
            for &hidden in m {
                keep.extend(std::iter::repeat(if hidden { 0.0 } else { 1.0 }).take(d));
            }
        }
        let drop: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
        let keep = g.constant(Tensor::new([b, n_patch, d], keep)?);
        let drop = g.constant(Tensor::new([b, n_patch, d], drop)?);
        let kept = g.mul(x, keep)?;
        let filled = g.mul(drop, bound.get(&name("mask_token"))?)?;
        x = g.add(kept, filled)?;
    }

    let pos = bound.get(&name("pos_embed"))?;
    let base = base_grid_of(g.value(pos))?;
    if g.shape(pos)[1] != d {
        return Err(Error::ParamMismatch("pos_embed width differs from embed_dim".into()));
    }
    let pos_patch = g.slice(pos, 0, 1, base * base)?;
    let pos_patch = if grid == (base, base) {
        pos_patch
    } else {
        g.mix_rows(pos_patch, bicubic_mix(base, grid.0, grid.1))?
    };
    let x = g.add(x, pos_patch)?;

    let pos_cls = g.slice(pos, 0, 0, 1)?;
    let pos_cls = g.reshape(pos_cls, &[d])?;
    let cls = g.add(bound.get(&name("cls_token"))?, pos_cls)?;
    let zeros = g.constant(Tensor::zeros([b, 1, d]));
    let cls = g.add(zeros, cls)?;
    let mut x = g.concat(&[cls, x], 1)?;

    let tokens = n_patch + 1;
    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let mut attention = Vec::new();
    for i in 0..cfg.depth {
        let p = |r: &str| bound.get(&block_name(i, r));
        let h = g.layernorm(x, p("norm1.weight")?, p("norm1.bias")?, cfg.layernorm_eps)?;
        let qkv = linear(g, h, p("attn.qkv.weight")?, p("attn.qkv.bias")?)?;
        let qkv = g.reshape(qkv, &[b, tokens, 3, heads, hd])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = g.reshape(qkv, &[3 * b * heads, tokens, hd])?;
        let q = g.slice(qkv, 0, 0, b * heads)?;
        let k = g.slice(qkv, 0, b * heads, b * heads)?;
        let v = g.slice(qkv, 0, 2 * b * heads, b * heads)?;
        let scores = g.bmm(q, k, true)?;
        let attn = g.softmax(scores, (hd as f64).sqrt())?;
        if keep_attention {
            attention.push(attn);
        }
        let o = g.bmm(attn, v, false)?;
        let o = g.reshape(o, &[b, heads, tokens, hd])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b, tokens, d])?;
        let o = linear(g, o, p("attn.proj.weight")?, p("attn.proj.bias")?)?;
        x = g.add(x, o)?;

        let h = g.layernorm(x, p("norm2.weight")?, p("norm2.bias")?, cfg.layernorm_eps)?;
        let h = linear(g, h, p("mlp.fc1.weight")?, p("mlp.fc1.bias")?)?;
        let h = g.gelu(h)?;
        let h = linear(g, h, p("mlp.fc2.weight")?, p("mlp.fc2.bias")?)?;
        x = g.add(x, h)?;
    }
    let x = g.layernorm(
        x,
        bound.get(&name("norm.weight"))?,
        bound.get(&name("norm.bias"))?,
        cfg.layernorm_eps,
    )?;
    let cls = g.slice(x, 1, 0, 1)?;
    let cls = g.reshape(cls, &[b, d])?;
    let patches = g.slice(x, 1, 1, n_patch)?;
    Ok(EncodedBatch {
        cls,
        patches,
        grid,
        attention,
    })
}

/// Frozen encoder output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// Global class token.
    pub cls: Vec<f64>,
    /// Patch tokens laid out as `[rows, cols, D]`.
    pub patches: Tensor,
}

impl EncoderOutput {
    pub fn grid(&self) -> (usize, usize) {
        (self.patches.shape()[0], self.patches.shape()[1])
    }

    pub fn dim(&self) -> usize {
        self.cls.len()
    }
}

/// Encodes equally sized images without recording gradients.
pub fn encode_batch(images: &[&GrayImage], cfg: &ViTConfig, params: &ParamStore) -> Result<Vec<EncoderOutput>> {
    let mut g = Graph::new();
    let bound = params.filter_prefix(BACKBONE).bind(&mut g, false);
    let out = forward_batch(&mut g, &bound, cfg, images, None, false)?;
    let d = cfg.embed_dim;
    let (rows, cols) = out.grid;
    let per = rows * cols * d;
    let cls = g.value(out.cls).data();
    let pt = g.value(out.patches).data();
    (0..images.len())
        .map(|i| {
            Ok(EncoderOutput {
                cls: cls[i * d..(i + 1) * d].to_vec(),
                patches: Tensor::new([rows, cols, d], pt[i * per..(i + 1) * per].to_vec())?,
            })
        })
        .collect()
}

/// Encodes a single image.
pub fn encode(image: &GrayImage, cfg: &ViTConfig, params: &ParamStore) -> Result<EncoderOutput> {
    Ok(encode_batch(&[image], cfg, params)?.remove(0))
}
