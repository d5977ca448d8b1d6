use super::groups::{make_group_splits, GroupSplits, ALL};
use crate::adapters::{
    train_adapter, validation_metric, AdapterSpec, FeatureSet, GridConfig, LabeledFeatures, TaskKind, TrainedAdapter,
};
use crate::error::{Error, Result};
use crate::metrics::{mann_whitney, MannWhitney};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::vit::write_atomic;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const BIAS_MATRIX: &str = "bias_matrix.csv";
pub const BIAS_JSON: &str = "bias_report.json";

/// One train-group/test-group comparison of AUROC populations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Group whose training subsets produced the cross-group population.
    pub train: String,
    /// Test group; the same-group population comes from models trained on it.
    pub test: String,
    pub u: f64,
    pub p: f64,
    pub exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub groups: Vec<String>,
    /// Rows of the matrix: every group, then [`ALL`].
    pub train_keys: Vec<String>,
    /// `values[train][test]`: test AUROC of each fold's model.
    pub values: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    /// Per (train ≠ test) pair: same-group vs cross-group populations on
    /// the test group.
    pub comparisons: Vec<Comparison>,
    /// All same-group values against all cross-group values.
    pub pooled: Option<Comparison>,
    pub spec: AdapterSpec,
    pub folds: usize,
    pub subset_size: usize,
    pub seed: u64,
}

impl BiasReport {
    pub fn mean(&self, train: &str, test: &str) -> Option<f64> {
        let v = self.values.get(train)?.get(test)?;
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `train\test` matrix of mean AUROC.
    pub fn matrix_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["train\\test".to_string()];
        header.extend(self.groups.iter().cloned());
        w.write_record(&header)?;
        for t in &self.train_keys {
            let mut row = vec![t.clone()];
            row.extend(self.groups.iter().map(|g| self.mean(t, g).map(|m| m.to_string()).unwrap_or_default()));
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(BIAS_MATRIX), self.matrix_csv()?.as_bytes())?;
        write_atomic(&dir.join(BIAS_JSON), serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(BIAS_JSON);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn compare(train: &str, test: &str, same: &[f64], cross: &[f64]) -> Result<Comparison> {
    let MannWhitney { u, p, exact } = mann_whitney(same, cross)?;
    Ok(Comparison { train: train.into(), test: test.into(), u, p, exact })
}

/// Trains `spec` on every subset of every fold and scores each model by
/// macro AUROC on every test group.
pub fn cross_group_eval(
    train: &LabeledFeatures,
    splits: &GroupSplits,
    spec: AdapterSpec,
    cfg: &GridConfig,
    test: &LabeledFeatures,
    test_groups: &[String],
) -> Result<BiasReport> {
    if !matches!(spec.task, TaskKind::Multilabel | TaskKind::Multiclass) {
        return Err(Error::invalid("bias audit scores classification adapters"));
    }
    if test_groups.len() != test.features.len() {
        return Err(Error::shape("cross_group_eval", "one group per test row required"));
    }
    let mut test_sets = BTreeMap::new();
    for g in &splits.groups {
        let idx: Vec<usize> = (0..test_groups.len()).filter(|&i| &test_groups[i] == g).collect();
        if idx.is_empty() {
            return Err(Error::invalid(format!("test split has no rows of group {}", g)));
        }
        test_sets.insert(g.clone(), test.subset(&idx)?);
    }
    let mut train_keys = splits.groups.clone();
    train_keys.push(ALL.to_string());
    let mut values: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for fold in &splits.folds {
        for key in &train_keys {
            let subset = train.subset(&fold.subsets[key])?;
            let params = train_adapter(spec, &subset, cfg, splits.seed, fold.id)?;
            let adapter = TrainedAdapter {
                spec,
                dim: train.features.dim(),
                outputs: train.outputs(),
                params,
                val_score: f64::NAN,
                seed: splits.seed,
                cell_id: fold.id,
            };
            for (g, set) in &test_sets {
                let score = validation_metric(spec.task, &adapter.predict(&set.features)?, &set.targets)
                    .map_err(|e| Error::invalid(format!("degenerate test group {}: {}", g, e)))?;
                values.entry(key.clone()).or_default().entry(g.clone()).or_default().push(score);
            }
        }
    }
    let mut comparisons = Vec::new();
    let (mut same_all, mut cross_all) = (Vec::new(), Vec::new());
    for test_g in &splits.groups {
        let same = &values[test_g][test_g];
        same_all.extend_from_slice(same);
        for train_g in splits.groups.iter().filter(|g| *g != test_g) {
            let cross = &values[train_g][test_g];
            cross_all.extend_from_slice(cross);
            comparisons.push(compare(train_g, test_g, same, cross)?);
        }
    }
    let pooled = if cross_all.is_empty() { None } else { Some(compare("cross", "same", &same_all, &cross_all)?) };
    Ok(BiasReport {
        groups: splits.groups.clone(),
        train_keys,
        values,
        comparisons,
        pooled,
        spec,
        folds: splits.folds.len(),
        subset_size: splits.subset_size,
        seed: splits.seed,
    })
}

/// How labels depend on group membership in [`bias_benchmark`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BiasKind {
    /// Every group shares one label mechanism.
    Null,
    /// Each group's label is carried by its own feature channel.
    Planted,
}

/// A two-group synthetic audit problem.
#[derive(Clone, Debug)]
pub struct BiasBenchmark {
    pub train: LabeledFeatures,
    pub train_groups: Vec<String>,
    pub test: LabeledFeatures,
    pub test_groups: Vec<String>,
}

/// Features `[N, 4, 8]` for groups `A` and `B` with binary labels.
///
/// Channel 0 is a group indicator. Under [`BiasKind::Null`] channel 1
/// carries the label for everyone (signal strength 1, unit noise); under
/// [`BiasKind::Planted`] group A's label lives in channel 2 and group B's
/// in channel 3, the other channel being noise.
pub fn bias_benchmark(kind: BiasKind, train_per_group: usize, test_per_group: usize, seed: u64) -> Result<BiasBenchmark> {
    let (p, d) = (4usize, 8usize);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let make = |n: usize, tag: u64| -> Result<(LabeledFeatures, Vec<String>)> {
        let mut rng = stream(seed, &[0xb1a5, tag]);
        let mut tokens = Vec::with_capacity(2 * n * p * d);
        let mut targets = Vec::with_capacity(2 * n);
        let mut groups = Vec::with_capacity(2 * n);
        for gi in 0..2usize {
            for _ in 0..n {
                let y = rng.gen_bool(0.5);
                let s = if y { 1.0 } else { -1.0 };
                let channel = match kind {
                    BiasKind::Null => 1,
                    BiasKind::Planted => 2 + gi,
                };
                for _ in 0..p {
                    for ch in 0..d {
                        let mut v = normal.sample(&mut rng);
                        if ch == 0 {
                            v = gi as f64 + 0.1 * v;
                        } else if ch == channel {
                            v += s;
                        }
                        tokens.push(v);
                    }
                }
                targets.push(f64::from(y));
                groups.push(["A", "B"][gi].to_string());
            }
        }
        let m = 2 * n;
        let features = FeatureSet { cls: Tensor::zeros([m, d]), tokens: Tensor::new([m, p, d], tokens)?, grid: (2, 2) };
        Ok((LabeledFeatures::new(features, Tensor::new([m, 1], targets)?)?, groups))
    };
    let (train, train_groups) = make(train_per_group, 0)?;
    let (test, test_groups) = make(test_per_group, 1)?;
    Ok(BiasBenchmark { train, train_groups, test, test_groups })
}

/// The adapter protocol used by the synthetic audits: a linear head over
/// averaged tokens.
pub fn benchmark_spec() -> AdapterSpec {
    AdapterSpec { task: TaskKind::Multilabel, pooling: crate::adapters::Pooling::Average, depth: 1, lr: 0.1, wd: 0.0 }
}

/// Runs the full audit on a fresh benchmark drawn from `seed`.
pub fn run_bias_benchmark(kind: BiasKind, folds: usize, seed: u64) -> Result<BiasReport> {
    let bench = bias_benchmark(kind, 2000, 200, seed)?;
    let splits = make_group_splits(&bench.train_groups, folds, Some(60), seed)?;
    let cfg = GridConfig { epochs: 10, batch_size: 64, momentum: 0.9 };
    cross_group_eval(&bench.train, &splits, benchmark_spec(), &cfg, &bench.test, &bench.test_groups)
}
