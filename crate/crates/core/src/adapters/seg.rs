use super::grid::{epoch_order, FeatureSet, Sgd};
use super::head::task_loss;
use super::spec::{TaskKind, SEG_BATCH, SEG_ITERATIONS, SEG_LRS, SEG_WARMUP};
use crate::error::{Error, Result};
use crate::metrics::dice_macro;
use crate::params::{trunc_normal, Bound, ParamStore};
use crate::pretrain::Schedule;
use crate::rng::stream;
use crate::tensor::{Graph, RowMix, Tensor, Var};
use crate::vit::Checkpoint;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const TAG_INIT: u64 = 0x5e9;

/// Patch features with per-pixel label maps of a common extent.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSet {
    pub features: FeatureSet,
    /// Row-major `height × width` class maps, one per image.
    pub masks: Vec<Vec<usize>>,
    pub size: (usize, usize),
    pub classes: usize,
}

impl SegSet {
    pub fn new(features: FeatureSet, masks: Vec<Vec<usize>>, size: (usize, usize), classes: usize) -> Result<Self> {
        if masks.len() != features.len() {
            return Err(Error::shape("seg_set", format!("{} masks for {} images", masks.len(), features.len())));
        }
        if let Some((i, _)) = masks.iter().enumerate().find(|(_, m)| m.len() != size.0 * size.1) {
            return Err(Error::shape("seg_set", format!("mask {} does not cover {}×{} pixels", i, size.0, size.1)));
        }
        if size.0 < features.grid.0 || size.1 < features.grid.1 {
            return Err(Error::shape("seg_set", "mask extent smaller than the patch grid"));
        }
        if classes < 2 || masks.iter().flatten().any(|&c| c >= classes) {
            return Err(Error::invalid("segmentation needs ≥ 2 classes and labels below the class count"));
        }
        Ok(SegSet { features, masks, size, classes })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Per-patch linear classifier, a residual 3×3 convolution over the
/// patch-score grid (zero padded, zero initialized), and bilinear
/// upsampling of the scores to pixel resolution.
///
/// Parameters: `cls.weight` `[D, C]`, `cls.bias`, `refine.weight`
/// `[9·C, C]` (rows ordered by kernel offset, then input class) and
/// `refine.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegDecoder {
    pub dim: usize,
    pub classes: usize,
    pub grid: (usize, usize),
    pub size: (usize, usize),
}

/// Source coordinate for output index `o` under half-pixel alignment.
fn source_coord(o: usize, out: usize, src: usize) -> (usize, usize, f64) {
    let x = ((o as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let x0 = x.floor() as usize;
    let x1 = (x0 + 1).min(src - 1);
    (x0, x1, x - x0 as f64)
}

/// Bilinear upsampling of `rows × cols` cells to `height × width`
/// pixels for `images` stacked grids.
pub fn bilinear_plan(grid: (usize, usize), size: (usize, usize), images: usize) -> Vec<RowMix> {
    let (rows, cols) = grid;
    let (h, w) = size;
    let mut one = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, wy) = source_coord(y, h, rows);
        for x in 0..w {
            let (x0, x1, wx) = source_coord(x, w, cols);
            let anchor = y0 * cols + x0;
            let mut terms = Vec::with_capacity(3);
            for (idx, wt) in [
                (y0 * cols + x1, (1.0 - wy) * wx),
                (y1 * cols + x0, wy * (1.0 - wx)),
                (y1 * cols + x1, wy * wx),
            ] {
                if wt != 0.0 && idx != anchor {
                    terms.push((idx, wt));
                }
            }
            one.push(RowMix { anchor, terms });
        }
    }
    let p = rows * cols;
    (0..images)
        .flat_map(|b| {
            one.iter().map(move |m| RowMix {
                anchor: m.anchor + b * p,
                terms: m.terms.iter().map(|&(i, wt)| (i + b * p, wt)).collect(),
            })
        })
        .collect()
}

impl SegDecoder {
    pub fn new(dim: usize, classes: usize, grid: (usize, usize), size: (usize, usize)) -> Result<Self> {
        if dim == 0 || classes < 2 || grid.0 == 0 || grid.1 == 0 || size.0 < grid.0 || size.1 < grid.1 {
            return Err(Error::invalid("invalid segmentation decoder geometry"));
        }
        Ok(SegDecoder { dim, classes, grid, size })
    }

    pub fn init<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let c = self.classes;
        let mut p = ParamStore::new();
        p.insert("cls.weight", trunc_normal(rng, &[self.dim, c], 0.02));
        p.insert("cls.bias", Tensor::zeros([c]));
        p.insert("refine.weight", Tensor::zeros([9 * c, c]));
        p.insert("refine.bias", Tensor::zeros([c]));
        p
    }

    /// Patch-level scores `[B, P, C]` after refinement.
    pub fn patch_scores(&self, g: &mut Graph, bound: &Bound, tokens: Var) -> Result<Var> {
        let s = g.shape(tokens).to_vec();
        let (rows, cols) = self.grid;
        let p = rows * cols;
        if s.len() != 3 || s[1] != p || s[2] != self.dim {
            return Err(Error::shape("seg_decoder", format!("tokens {:?} for grid {:?} dim {}", s, self.grid, self.dim)));
        }
        let (b, c) = (s[0], self.classes);
        let w = bound.get("cls.weight")?;
        let bias = bound.get("cls.bias")?;
        let scores = g.matmul(tokens, w, false)?;
        let scores = g.add(scores, bias)?;
        let mut index = Vec::with_capacity(b * p * 9 * c);
        for bi in 0..b {
            for i in 0..rows as isize {
                for j in 0..cols as isize {
                    for di in -1..=1isize {
                        for dj in -1..=1isize {
                            let (y, x) = (i + di, j + dj);
                            let inside = y >= 0 && x >= 0 && y < rows as isize && x < cols as isize;
                            for k in 0..c {
                                index.push(inside.then(|| (bi * p + y as usize * cols + x as usize) * c + k));
                            }
                        }
                    }
                }
            }
        }
        let neigh = g.gather(scores, index, &[b, p, 9 * c])?;
        let rw = bound.get("refine.weight")?;
        let rb = bound.get("refine.bias")?;
        let refined = g.matmul(neigh, rw, false)?;
        let refined = g.add(refined, rb)?;
        g.add(scores, refined)
    }

    /// Pixel scores `[B·H·W, C]`, images stacked in order.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, tokens: Var) -> Result<Var> {
        let scores = self.patch_scores(g, bound, tokens)?;
        let b = g.shape(scores)[0];
        let flat = g.reshape(scores, &[b * self.grid.0 * self.grid.1, self.classes])?;
        g.mix_rows(flat, bilinear_plan(self.grid, self.size, b))
    }
}

/// One-hot pixel targets `[Σ pixels, C]` for the listed images.
fn pixel_targets(set: &SegSet, idx: &[usize]) -> Result<Tensor> {
    let c = set.classes;
    let mut t = Vec::with_capacity(idx.len() * set.size.0 * set.size.1 * c);
    for &i in idx {
        for &label in &set.masks[i] {
            t.extend((0..c).map(|k| f64::from(k == label)));
        }
    }
    Tensor::new([t.len() / c, c], t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    pub iterations: usize,
    pub warmup_iters: usize,
    pub batch_size: usize,
    pub lrs: Vec<f64>,
    pub momentum: f64,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            iterations: SEG_ITERATIONS,
            warmup_iters: SEG_WARMUP,
            batch_size: SEG_BATCH,
            lrs: SEG_LRS.to_vec(),
            momentum: 0.9,
        }
    }
}

impl SegConfig {
    /// Linear warmup from 0 to `lr`, then linear decay to 0.
    pub fn schedule(&self, lr: f64) -> Schedule {
        Schedule::linear(self.warmup_iters, self.iterations, 0.0, lr, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lrs.is_empty() || self.lrs.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::invalid("segmentation grid needs a positive batch size and learning rates"));
        }
        self.schedule(1.0).validate()
    }
}

/// Sample indices of iteration `iter`: consecutive slices of a stream of
/// per-epoch permutations, shared by every learning rate.
pub fn seg_batch(seed: u64, iter: usize, batch: usize, n: usize) -> Vec<usize> {
    let start = iter * batch;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (start..start + batch)
        .map(|k| {
            let epoch = k / n;
            if cached.as_ref().map_or(true, |c| c.0 != epoch) {
                cached = Some((epoch, epoch_order(seed ^ 0x5e95_e950, epoch, n)));
            }
            cached.as_ref().expect("filled above").1[k % n]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedSegDecoder {
    pub decoder: SegDecoder,
    pub lr: f64,
    pub params: ParamStore,
    pub val_mdice: f64,
    pub seed: u64,
}

impl TrainedSegDecoder {
    /// Pixel label maps, argmax over classes with ties to the lower class.
    pub fn predict(&self, features: &FeatureSet) -> Result<Vec<Vec<usize>>> {
        let (h, w) = self.decoder.size;
        let c = self.decoder.classes;
        let mut out = Vec::with_capacity(features.len());
        let idx: Vec<usize> = (0..features.len()).collect();
        for chunk in idx.chunks(16) {
            let mut g = Graph::new();
            let bound = self.params.bind(&mut g, false);
            let x = g.constant(features.token_rows(chunk)?);
            let y = self.decoder.forward(&mut g, &bound, x)?;
            let scores = g.value(y).data();
            for img in scores.chunks(h * w * c) {
                out.push(
                    img.chunks(c)
                        .map(|px| (0..c).fold(0, |best, k| if px[k] > px[best] { k } else { best }))
                        .collect(),
                );
            }
        }
        Ok(out)
    }

    /// Mean over images of the per-image macro Dice.
    pub fn mdice(&self, set: &SegSet) -> Result<f64> {
        let pred = self.predict(&set.features)?;
        let mut total = 0.0;
        for (p, m) in pred.iter().zip(&set.masks) {
            total += dice_macro(p, m, set.classes)?;
        }
        Ok(total / set.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let d = &self.decoder;
        Checkpoint {
            meta: serde_json::json!({
                "kind": "seg_decoder",
                "dim": d.dim,
                "classes": d.classes,
                "grid": [d.grid.0, d.grid.1],
                "size": [d.size.0, d.size.1],
                "lr": self.lr,
                "val_mdice": self.val_mdice,
                "seed": self.seed,
            }),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = &ck.meta;
        if m["kind"] != "seg_decoder" {
            return Err(Error::invalid("checkpoint does not hold a segmentation decoder"));
        }
        let get = |k: &str| m.get(k).cloned().ok_or_else(|| Error::invalid(format!("decoder checkpoint lacks {}", k)));
        let pair: fn(serde_json::Value) -> Result<(usize, usize)> = |v| Ok(serde_json::from_value(v)?);
        let decoder = SegDecoder::new(
            serde_json::from_value(get("dim")?)?,
            serde_json::from_value(get("classes")?)?,
            pair(get("grid")?)?,
            pair(get("size")?)?,
        )?;
        if !decoder.init(&mut stream(0, &[])).same_layout(&ck.params) {
            return Err(Error::ParamMismatch("decoder parameters do not match the geometry".into()));
        }
        Ok(TrainedSegDecoder {
            decoder,
            lr: serde_json::from_value(get("lr")?)?,
            val_mdice: serde_json::from_value(get("val_mdice")?)?,
            seed: serde_json::from_value(get("seed")?)?,
            params: ck.params.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug)]
pub struct SegSearch {
    /// `(lr, validation mDice)` for every grid entry, in grid order.
    pub table: Vec<(f64, f64)>,
    pub best: TrainedSegDecoder,
}

/// Trains one decoder per learning rate with soft Dice loss and keeps the
/// best by validation mDice (ties to the lower learning rate).
pub fn train_seg_decoder(train: &SegSet, val: &SegSet, cfg: &SegConfig, seed: u64) -> Result<SegSearch> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("segmentation needs nonempty train and val splits"));
    }
    if train.size != val.size || train.classes != val.classes || train.features.grid != val.features.grid {
        return Err(Error::shape("train_seg_decoder", "train and val geometry differ"));
    }
    let decoder = SegDecoder::new(train.features.dim(), train.classes, train.features.grid, train.size)?;
    let mut table = Vec::with_capacity(cfg.lrs.len());
    let mut best: Option<TrainedSegDecoder> = None;
    for &lr in &cfg.lrs {
        let mut params = decoder.init(&mut stream(seed, &[TAG_INIT]));
        let sched = cfg.schedule(lr);
        let mut opt = Sgd::default();
        for iter in 0..cfg.iterations {
            let idx = seg_batch(seed, iter, cfg.batch_size, train.len());
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let x = g.constant(train.features.token_rows(&idx)?);
            let y = decoder.forward(&mut g, &bound, x)?;
            let loss = task_loss(&mut g, TaskKind::Segmentation, y, &pixel_targets(train, &idx)?)?;
            let grads = g.backward(loss)?;
            let named: BTreeMap<String, Tensor> =
                bound.iter().filter_map(|(k, v)| grads.get(*v).map(|t| (k.clone(), t.clone()))).collect();
            opt.step(&mut params, &named, sched.value(iter)?, 0.0, cfg.momentum);
        }
        let fitted = TrainedSegDecoder { decoder: decoder.clone(), lr, params, val_mdice: f64::NAN, seed };
        let score = fitted.mdice(val)?;
        log::info!("segmentation lr {:e}: val mDice {:.4}", lr, score);
        table.push((lr, score));
        let better = match &best {
            None => true,
            Some(b) => score > b.val_mdice || (score == b.val_mdice && lr < b.lr),
        };
        if better {
            best = Some(TrainedSegDecoder { val_mdice: score, ..fitted });
        }
    }
    Ok(SegSearch { table, best: best.expect("nonempty learning-rate grid") })
}
