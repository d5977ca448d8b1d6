use crate::error::{Error, Result};
use crate::rng::stream;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const DEFAULT_FOLDS: usize = 20;
/// Name of the subset drawn from every training row regardless of group.
pub const ALL: &str = "All";

const TAG_FOLD: u64 = 0xf01d;
const TAG_SPLIT: u64 = 0x5b17;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgeBin {
    Young,
    Middle,
    Elder,
}

impl AgeBin {
    /// `[0, 35)` Young, `[35, 60)` Middle, `[60, ∞)` Elder.
    pub fn of(age: f64) -> Result<Self> {
        if !(age >= 0.0 && age.is_finite()) {
            return Err(Error::invalid(format!("invalid age {}", age)));
        }
        Ok(if age < 35.0 {
            AgeBin::Young
        } else if age < 60.0 {
            AgeBin::Middle
        } else {
            AgeBin::Elder
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            AgeBin::Young => "Young",
            AgeBin::Middle => "Middle",
            AgeBin::Elder => "Elder",
        }
    }
}

/// Training subsets of one fold, keyed by group name plus [`ALL`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub id: usize,
    pub subsets: BTreeMap<String, Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSplits {
    /// Distinct group names in sorted order.
    pub groups: Vec<String>,
    /// Size of every subset in every fold.
    pub subset_size: usize,
    pub folds: Vec<Fold>,
    pub seed: u64,
}

/// Draws `n_folds` sets of equal-size training subsets, one per group plus
/// one over all rows. `groups[i]` is the group of training row `i`; the
/// subset size defaults to the smallest group.
pub fn make_group_splits(groups: &[String], n_folds: usize, subset_size: Option<usize>, seed: u64) -> Result<GroupSplits> {
    if groups.is_empty() || n_folds == 0 {
        return Err(Error::invalid("group splits need rows and at least one fold"));
    }
    let mut members: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        members.entry(g.clone()).or_default().push(i);
    }
    if members.contains_key(ALL) {
        return Err(Error::invalid(format!("group name {:?} is reserved", ALL)));
    }
    let smallest = members.values().map(Vec::len).min().expect("nonempty");
    let size = subset_size.unwrap_or(smallest);
    if size == 0 {
        return Err(Error::invalid("subset size must be positive"));
    }
    if let Some((name, m)) = members.iter().find(|(_, m)| m.len() < size) {
        return Err(Error::invalid(format!("group {} has {} rows, fewer than the subset size {}", name, m.len(), size)));
    }
    let all: Vec<usize> = (0..groups.len()).collect();
    let folds = (0..n_folds)
        .map(|fold| {
            let mut subsets = BTreeMap::new();
            for (gi, (name, rows)) in members.iter().chain(std::iter::once((&ALL.to_string(), &all))).enumerate() {
                let mut rng = stream(seed, &[TAG_FOLD, fold as u64, gi as u64]);
                let mut pick: Vec<usize> = index::sample(&mut rng, rows.len(), size).into_iter().map(|k| rows[k]).collect();
                pick.sort_unstable();
                subsets.insert(name.clone(), pick);
            }
            Fold { id: fold, subsets }
        })
        .collect();
    Ok(GroupSplits { groups: members.into_keys().collect(), subset_size: size, folds, seed })
}

/// Row indices of a train/val/test partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// 80/10/10 partition stratified by `strata` (e.g. a label key); each
/// stratum is shuffled and cut separately.
pub fn split_80_10_10(strata: &[String], seed: u64) -> Partition {
    let mut by: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in strata.iter().enumerate() {
        by.entry(s).or_default().push(i);
    }
    let mut part = Partition { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (k, (_, mut rows)) in by.into_iter().enumerate() {
        rows.shuffle(&mut stream(seed, &[TAG_SPLIT, k as u64]));
        let n = rows.len();
        let n_val = (n as f64 * 0.1).round() as usize;
        let n_test = (n as f64 * 0.1).round() as usize;
        part.val.extend_from_slice(&rows[..n_val]);
        part.test.extend_from_slice(&rows[n_val..n_val + n_test]);
        part.train.extend_from_slice(&rows[n_val + n_test..]);
    }
    part.train.sort_unstable();
    part.val.sort_unstable();
    part.test.sort_unstable();
    part
}
