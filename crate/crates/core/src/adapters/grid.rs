use super::head::{task_loss, AdapterHead};
use super::spec::{classification_grid, AdapterSpec, Pooling, TaskKind};
use crate::error::{Error, Result};
use crate::metrics::{auroc_macro, smape};
use crate::params::ParamStore;
use crate::pretrain::Schedule;
use crate::rng::stream;
use crate::tensor::{Graph, Tensor};
use crate::vit::{Checkpoint, EncoderOutput};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const TAG_CELL: u64 = 0xce11;
const TAG_EPOCH: u64 = 0xe90c;

/// Frozen encoder outputs for a set of images.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    /// `[N, D]` class tokens.
    pub cls: Tensor,
    /// `[N, P, D]` patch tokens, row-major over the grid.
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

impl FeatureSet {
    pub fn from_outputs(outputs: &[EncoderOutput]) -> Result<Self> {
        let first = outputs.first().ok_or_else(|| Error::invalid("empty feature set"))?;
        let (grid, d) = (first.grid(), first.dim());
        let p = grid.0 * grid.1;
        let mut cls = Vec::with_capacity(outputs.len() * d);
        let mut tokens = Vec::with_capacity(outputs.len() * p * d);
        for o in outputs {
            if o.grid() != grid || o.dim() != d {
                return Err(Error::shape("feature_set", "mixed grids or widths"));
            }
            cls.extend_from_slice(&o.cls);
            tokens.extend_from_slice(o.patches.data());
        }
        Ok(FeatureSet {
            cls: Tensor::new([outputs.len(), d], cls)?,
            tokens: Tensor::new([outputs.len(), p, d], tokens)?,
            grid,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    pub fn patches(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Token block `[idx.len(), P, D]` for the given rows.
    pub fn token_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let width = self.patches() * self.dim();
        let src = self.tokens.data();
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        Tensor::new([idx.len(), self.patches(), self.dim()], out)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut cls = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            cls.extend_from_slice(self.cls.row(i));
        }
        Ok(FeatureSet { cls: Tensor::new([idx.len(), d], cls)?, tokens: self.token_rows(idx)?, grid: self.grid })
    }
}

/// Features with `[N, C]` targets: 0/1 for multilabel, one-hot rows for
/// multiclass, real values for regression.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatures {
    pub features: FeatureSet,
    pub targets: Tensor,
}

impl LabeledFeatures {
    pub fn new(features: FeatureSet, targets: Tensor) -> Result<Self> {
        if targets.rank() != 2 || targets.shape()[0] != features.len() {
            return Err(Error::shape("labeled_features", format!("{} rows vs targets {:?}", features.len(), targets.shape())));
        }
        Ok(LabeledFeatures { features, targets })
    }

    pub fn outputs(&self) -> usize {
        self.targets.shape()[1]
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let c = self.outputs();
        let mut t = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            t.extend_from_slice(self.targets.row(i));
        }
        Self::new(self.features.subset(idx)?, Tensor::new([idx.len(), c], t)?)
    }

    /// Classes with no positive (or no negative) training example.
    pub fn degenerate_classes(&self) -> Vec<usize> {
        let c = self.outputs();
        (0..c)
            .filter(|&k| {
                let pos = self.targets.data().chunks(c).filter(|r| r[k] == 1.0).count();
                pos == 0 || pos == self.features.len()
            })
            .collect()
    }
}

/// One-hot `[N, classes]` targets from class indices.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if labels.iter().any(|&l| l >= classes) {
        return Err(Error::invalid("label outside the class range"));
    }
    Tensor::from_fn([labels.len(), classes], |i| f64::from(labels[i / classes] == i % classes))
}

/// Minibatch SGD settings shared by every grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { epochs: 20, batch_size: 64, momentum: 0.9 }
    }
}

/// SGD with heavy-ball momentum and coupled L2 weight decay.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64, wd: f64, momentum: f64) {
        for (name, t) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; t.numel()]);
            let w = t.data_mut();
            for i in 0..w.len() {
                v[i] = momentum * v[i] + g.data()[i] + wd * w[i];
                w[i] -= lr * v[i];
            }
        }
    }
}

/// An adapter fitted on frozen features.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedAdapter {
    pub spec: AdapterSpec,
    pub dim: usize,
    pub outputs: usize,
    pub params: ParamStore,
    pub val_score: f64,
    pub seed: u64,
    pub cell_id: usize,
}

impl TrainedAdapter {
    pub fn head(&self) -> Result<AdapterHead> {
        AdapterHead::new(self.spec, self.dim, self.outputs)
    }

    /// Whether per-head attention maps are available.
    pub fn has_attention(&self) -> bool {
        matches!(self.spec.pooling, Pooling::Attentive { .. })
    }

    /// Raw outputs `[N, C]` (logits, or values for regression).
    pub fn predict(&self, features: &FeatureSet) -> Result<Tensor> {
        Ok(self.run(features, false)?.0)
    }

    /// Attention maps `[N, H, rows, cols]`, or `None` for average pooling.
    pub fn attention_maps(&self, features: &FeatureSet) -> Result<Option<Tensor>> {
        match self.spec.pooling {
            Pooling::Average => Ok(None),
            Pooling::Attentive { heads } => {
                let maps = self.run(features, true)?.1;
                let (r, c) = features.grid;
                Ok(Some(Tensor::new([features.len(), heads, r, c], maps)?))
            }
        }
    }

    fn run(&self, features: &FeatureSet, want_maps: bool) -> Result<(Tensor, Vec<f64>)> {
        let head = self.head()?;
        if features.dim() != self.dim {
            return Err(Error::shape("adapter", format!("features of width {} for a {}-wide adapter", features.dim(), self.dim)));
        }
        let n = features.len();
        let mut out = Vec::with_capacity(n * self.outputs);
        let mut maps = Vec::new();
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(256) {
            let mut g = Graph::new();
            let bound = self.params.bind(&mut g, false);
            let x = g.constant(features.token_rows(chunk)?);
            let y = head.forward(&mut g, &bound, x)?;
            out.extend_from_slice(g.value(y.outputs).data());
            if want_maps {
                if let Some(a) = y.attention {
                    maps.extend_from_slice(g.value(a).data());
                }
            }
        }
        Ok((Tensor::new([n, self.outputs], out)?, maps))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: serde_json::json!({
                "kind": "adapter",
                "spec": self.spec,
                "dim": self.dim,
                "outputs": self.outputs,
                "val_score": self.val_score,
                "seed": self.seed,
                "cell_id": self.cell_id,
            }),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = &ck.meta;
        if m["kind"] != "adapter" {
            return Err(Error::invalid("checkpoint does not hold an adapter"));
        }
        let field = |k: &str| m.get(k).ok_or_else(|| Error::invalid(format!("adapter checkpoint lacks {}", k)));
        let adapter = TrainedAdapter {
            spec: serde_json::from_value(field("spec")?.clone())?,
            dim: serde_json::from_value(field("dim")?.clone())?,
            outputs: serde_json::from_value(field("outputs")?.clone())?,
            val_score: serde_json::from_value(field("val_score")?.clone())?,
            seed: serde_json::from_value(field("seed")?.clone())?,
            cell_id: serde_json::from_value(field("cell_id")?.clone())?,
            params: ck.params.clone(),
        };
        let expected = adapter.head()?.init(&mut stream(0, &[]));
        if !expected.same_layout(&adapter.params) {
            return Err(Error::ParamMismatch("adapter parameters do not match the spec".into()));
        }
        Ok(adapter)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Scores used for ranking: logits for multilabel, class probabilities for
/// multiclass, values for regression.
pub fn output_scores(task: TaskKind, outputs: &Tensor) -> Vec<Vec<f64>> {
    let c = outputs.shape()[1];
    outputs
        .data()
        .chunks(c)
        .map(|row| {
            if task == TaskKind::Multiclass {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            } else {
                row.to_vec()
            }
        })
        .collect()
}

/// Validation metric: macro AUROC for classification, SMAPE for regression.
pub fn validation_metric(task: TaskKind, outputs: &Tensor, targets: &Tensor) -> Result<f64> {
    match task {
        TaskKind::Multilabel | TaskKind::Multiclass => {
            let scores = output_scores(task, outputs);
            let c = targets.shape()[1];
            let labels: Vec<Vec<bool>> = targets.data().chunks(c).map(|r| r.iter().map(|&v| v == 1.0).collect()).collect();
            Ok(auroc_macro(&scores, &labels)?.mean)
        }
        TaskKind::Regression => smape(outputs.data(), targets.data()),
        TaskKind::Segmentation => Err(Error::invalid("segmentation is scored by the segmentation decoder")),
    }
}

/// Shuffled sample order of one epoch, shared by every cell of a grid.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, &[TAG_EPOCH, epoch as u64]));
    idx
}

/// Trains one cell; its initialization comes from stream `(seed, cell_id)`
/// and its learning rate follows a cosine decay to zero.
pub fn train_adapter(
    spec: AdapterSpec,
    train: &LabeledFeatures,
    cfg: &GridConfig,
    seed: u64,
    cell_id: usize,
) -> Result<ParamStore> {
    let head = AdapterHead::new(spec, train.features.dim(), train.outputs())?;
    if train.features.is_empty() || cfg.batch_size == 0 {
        return Err(Error::invalid("adapter training needs data and a positive batch size"));
    }
    let mut params = head.init(&mut stream(seed, &[TAG_CELL, cell_id as u64]));
    let n = train.features.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let sched = Schedule::cosine(0, cfg.epochs * steps_per_epoch, spec.lr, spec.lr, 0.0);
    let mut opt = Sgd::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(seed, epoch, n);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.subset(chunk)?;
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let x = g.constant(batch.features.tokens);
            let y = head.forward(&mut g, &bound, x)?;
            let loss = task_loss(&mut g, spec.task, y.outputs, &batch.targets)?;
            let grads = g.backward(loss)?;
            let named: BTreeMap<String, Tensor> = bound
                .iter()
                .filter_map(|(k, v)| grads.get(*v).map(|t| (k.clone(), t.clone())))
                .collect();
            opt.step(&mut params, &named, sched.value(step)?, spec.wd, cfg.momentum);
            step += 1;
        }
    }
    Ok(params)
}

/// One row of the grid table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cell_id: usize,
    pub lr: f64,
    pub wd: f64,
    pub depth: usize,
    pub pooling: String,
    pub val_metric: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct GridSearch {
    pub task: TaskKind,
    /// Validation metric name, `auroc` or `smape`.
    pub metric: &'static str,
    pub table: Vec<GridRow>,
    /// Winning adapter for each seed, in seed order.
    pub best: Vec<TrainedAdapter>,
    /// Training classes lacking positives or negatives.
    pub degenerate_classes: Vec<usize>,
}

/// Index of the best spec: highest (or lowest) score, ties resolved by
/// [`AdapterSpec::tie_order`].
pub fn select_best(task: TaskKind, cells: &[(AdapterSpec, f64)]) -> Option<usize> {
    let better = |a: f64, b: f64| if task.higher_is_better() { a > b } else { a < b };
    let mut best: Option<usize> = None;
    for (i, (spec, score)) in cells.iter().enumerate() {
        if !score.is_finite() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(j) => {
                let (bs, bscore) = &cells[j];
                if better(*score, *bscore) || (*score == *bscore && spec.tie_order(bs).is_lt()) {
                    Some(i)
                } else {
                    Some(j)
                }
            }
        };
    }
    best
}

/// Trains every grid cell for every seed on identical minibatch streams
/// and keeps the best cell per seed by validation metric.
pub fn run_grid_search(
    train: &LabeledFeatures,
    val: &LabeledFeatures,
    task: TaskKind,
    seeds: &[u64],
    cfg: &GridConfig,
) -> Result<GridSearch> {
    run_grid(train, val, &classification_grid(task, train.outputs())?, seeds, cfg)
}

/// [`run_grid_search`] over an explicit list of cells.
pub fn run_grid(
    train: &LabeledFeatures,
    val: &LabeledFeatures,
    cells: &[AdapterSpec],
    seeds: &[u64],
    cfg: &GridConfig,
) -> Result<GridSearch> {
    let task = cells.first().ok_or_else(|| Error::invalid("empty grid"))?.task;
    if cells.iter().any(|c| c.task != task) {
        return Err(Error::invalid("grid mixes task kinds"));
    }
    if train.features.is_empty() || val.features.is_empty() {
        return Err(Error::invalid("grid search needs nonempty train and val splits"));
    }
    if train.outputs() != val.outputs() || train.features.dim() != val.features.dim() {
        return Err(Error::shape("grid_search", "train and val splits disagree in width"));
    }
    let degenerate = if task == TaskKind::Regression { Vec::new() } else { train.degenerate_classes() };
    for k in &degenerate {
        log::warn!("class {} has a single label value in the training split", k);
    }
    let mut table = Vec::with_capacity(cells.len() * seeds.len());
    let mut best = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut scored = Vec::with_capacity(cells.len());
        let mut fitted = Vec::with_capacity(cells.len());
        for (cell_id, &spec) in cells.iter().enumerate() {
            let params = train_adapter(spec, train, cfg, seed, cell_id)?;
            let adapter = TrainedAdapter {
                spec,
                dim: train.features.dim(),
                outputs: train.outputs(),
                params,
                val_score: f64::NAN,
                seed,
                cell_id,
            };
            let score = validation_metric(task, &adapter.predict(&val.features)?, &val.targets)?;
            log::debug!("seed {} cell {} {} = {:.4}", seed, cell_id, task.metric_name(), score);
            table.push(GridRow {
                cell_id,
                lr: spec.lr,
                wd: spec.wd,
                depth: spec.depth,
                pooling: spec.pooling.to_string(),
                val_metric: score,
                seed,
            });
            scored.push((spec, score));
            fitted.push(TrainedAdapter { val_score: score, ..adapter });
        }
        let i = select_best(task, &scored).ok_or_else(|| Error::invalid("no grid cell produced a finite score"))?;
        log::info!("seed {} best cell {} ({} = {:.4})", seed, i, task.metric_name(), scored[i].1);
        best.push(fitted.swap_remove(i));
    }
    Ok(GridSearch { task, metric: task.metric_name(), table, best, degenerate_classes: degenerate })
}

pub fn grid_to_csv(rows: &[GridRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn grid_from_csv(text: &str) -> Result<Vec<GridRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<Vec<GridRow>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable(n: usize, seed: u64) -> LabeledFeatures {
        use rand::Rng;
        let mut rng = stream(seed, &[]);
        let (p, d) = (4, 6);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let tokens = Tensor::from_fn([n, p, d], |i| {
            let row = i / (p * d);
            let ch = i % d;
            let noise: f64 = rng.gen_range(-0.3..0.3);
            if ch == 0 {
                if labels[row] == 1 { 1.0 + noise } else { -1.0 + noise }
            } else {
                noise
            }
        })
        .unwrap();
        let cls = Tensor::zeros([n, d]);
        let targets = Tensor::from_fn([n, 1], |i| labels[i] as f64).unwrap();
        LabeledFeatures::new(FeatureSet { cls, tokens, grid: (2, 2) }, targets).unwrap()
    }

    #[test]
    fn separable_reaches_perfect_auroc_and_is_deterministic() {
        let train = separable(40, 1);
        let val = separable(20, 2);
        let cells: Vec<AdapterSpec> = classification_grid(TaskKind::Multilabel, 1)
            .unwrap()
            .into_iter()
            .filter(|s| s.lr == 1e-2 && s.wd == 0.0)
            .collect();
        let cfg = GridConfig { epochs: 5, batch_size: 16, momentum: 0.9 };
        let a = run_grid(&train, &val, &cells, &[3], &cfg).unwrap();
        let b = run_grid(&train, &val, &cells, &[3], &cfg).unwrap();
        assert_eq!(a.best[0].val_score, 1.0);
        assert_eq!(a.best[0], b.best[0]);
        assert!(a.table.iter().all(|r| r.val_metric <= a.best[0].val_score));
        let csv = grid_to_csv(&a.table).unwrap();
        assert!(csv.starts_with("cell_id,lr,wd,depth,pooling,val_metric,seed\n"));
        assert_eq!(grid_from_csv(&csv).unwrap(), a.table);
    }

    #[test]
    fn ties_prefer_lower_lr() {
        let s = |lr| AdapterSpec { task: TaskKind::Multiclass, pooling: Pooling::Average, depth: 1, lr, wd: 0.0 };
        let cells = [(s(1e-2), 0.9), (s(1e-3), 0.9), (s(1e-1), 0.8)];
        assert_eq!(select_best(TaskKind::Multiclass, &cells), Some(1));
        assert_eq!(select_best(TaskKind::Regression, &cells), Some(2));
    }
}
