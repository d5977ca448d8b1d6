use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Multilabel,
    Multiclass,
    Regression,
    Segmentation,
}

impl TaskKind {
    /// Whether a larger validation metric is better (AUROC, Dice) or a
    /// smaller one (SMAPE).
    pub fn higher_is_better(self) -> bool {
        !matches!(self, TaskKind::Regression)
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            TaskKind::Multilabel | TaskKind::Multiclass => "auroc",
            TaskKind::Regression => "smape",
            TaskKind::Segmentation => "mdice",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Attentive { heads: usize },
    Average,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pooling::Attentive { heads } => write!(f, "attentive{}", heads),
            Pooling::Average => f.write_str("average"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub task: TaskKind,
    pub pooling: Pooling,
    /// 1 = linear, 2 = MLP with one hidden layer.
    pub depth: usize,
    pub lr: f64,
    pub wd: f64,
}

impl AdapterSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.depth) {
            return Err(Error::invalid(format!("adapter depth must be 1 or 2, got {}", self.depth)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.wd >= 0.0 && self.wd.is_finite()) {
            return Err(Error::invalid("adapter lr must be > 0 and wd ≥ 0"));
        }
        if let Pooling::Attentive { heads: 0 } = self.pooling {
            return Err(Error::invalid("attentive pooling needs at least one head"));
        }
        if self.task == TaskKind::Segmentation && self.pooling != Pooling::Average {
            return Err(Error::invalid("segmentation decoders do not pool"));
        }
        Ok(())
    }

    /// Preference order among equally scored cells: lower LR, lower WD,
    /// shallower, average pooling.
    pub fn tie_order(&self, other: &Self) -> Ordering {
        let pool_rank = |p: &Pooling| match p {
            Pooling::Average => 0usize,
            Pooling::Attentive { heads } => *heads,
        };
        self.lr
            .total_cmp(&other.lr)
            .then(self.wd.total_cmp(&other.wd))
            .then(self.depth.cmp(&other.depth))
            .then(pool_rank(&self.pooling).cmp(&pool_rank(&other.pooling)))
    }
}

pub const CLS_LRS: [f64; 13] = [1e-5, 2e-5, 5e-5, 1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 1e-1];
pub const CLS_WDS: [f64; 3] = [0.0, 1e-5, 1e-4];
pub const DEPTHS: [usize; 2] = [1, 2];

pub const SEG_LRS: [f64; 9] = [1e-5, 5e-4, 1e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1];
pub const SEG_ITERATIONS: usize = 5000;
pub const SEG_WARMUP: usize = 1500;
pub const SEG_BATCH: usize = 16;

/// Every cell of the global-task grid, in `cell_id` order: LR slowest,
/// then WD, depth, and pooling (average, then attentive with one head per
/// output).
pub fn classification_grid(task: TaskKind, outputs: usize) -> Result<Vec<AdapterSpec>> {
    if task == TaskKind::Segmentation {
        return Err(Error::invalid("segmentation uses the learning-rate grid"));
    }
    if outputs == 0 {
        return Err(Error::invalid("adapter needs at least one output"));
    }
    let mut cells = Vec::with_capacity(156);
    for &lr in &CLS_LRS {
        for &wd in &CLS_WDS {
            for &depth in &DEPTHS {
                for pooling in [Pooling::Average, Pooling::Attentive { heads: outputs }] {
                    cells.push(AdapterSpec { task, pooling, depth, lr, wd });
                }
            }
        }
    }
    Ok(cells)
}

pub fn segmentation_grid() -> Vec<AdapterSpec> {
    SEG_LRS
        .iter()
        .map(|&lr| AdapterSpec { task: TaskKind::Segmentation, pooling: Pooling::Average, depth: 1, lr, wd: 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        let g = classification_grid(TaskKind::Multilabel, 5).unwrap();
        assert_eq!(g.len(), 156);
        assert!(g.iter().all(|s| s.validate().is_ok()));
        assert_eq!(segmentation_grid().len(), 9);
    }

    #[test]
    fn tie_order_prefers_simple_cells() {
        let base = AdapterSpec { task: TaskKind::Multiclass, pooling: Pooling::Average, depth: 1, lr: 1e-3, wd: 0.0 };
        let deeper = AdapterSpec { depth: 2, ..base };
        let att = AdapterSpec { pooling: Pooling::Attentive { heads: 3 }, ..base };
        let fast = AdapterSpec { lr: 1e-2, ..deeper };
        assert_eq!(base.tie_order(&deeper), Ordering::Less);
        assert_eq!(base.tie_order(&att), Ordering::Less);
        assert_eq!(deeper.tie_order(&fast), Ordering::Less);
    }
}
