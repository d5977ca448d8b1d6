use crate::error::{Error, Result};

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

fn check(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape("metric", format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "metric input" });
    }
    Ok(())
}

/// Area under the ROC curve from the rank-sum statistic; tied scores count
/// one half. Undefined (error) unless both classes are present.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUROC needs both positive and negative labels"));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Average precision: `Σ_k (R_k − R_{k−1}) · P_k` over distinct score
/// thresholds taken in decreasing order (tied scores enter together).
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::invalid("AUPRC needs at least one positive label"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut new_tp = 0;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                new_tp += 1;
            }
            j += 1;
        }
        seen += j - i;
        tp += new_tp;
        if new_tp > 0 {
            ap += (new_tp as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
        i = j;
    }
    Ok(ap)
}

/// Per-class values and their mean over the classes where the metric is
/// defined. Undefined classes are reported as `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct MacroScore {
    pub mean: f64,
    pub per_class: Vec<Option<f64>>,
}

fn macro_over(
    name: &str,
    scores: &[Vec<f64>],
    labels: &[Vec<bool>],
    f: fn(&[f64], &[bool]) -> Result<f64>,
) -> Result<MacroScore> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::shape("macro metric", "score and label matrices must be nonempty and aligned"));
    }
    let c = scores[0].len();
    if scores.iter().any(|r| r.len() != c) || labels.iter().any(|r| r.len() != c) {
        return Err(Error::shape("macro metric", "ragged score or label rows"));
    }
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[k]).collect();
        match f(&s, &l) {
            Ok(v) => per_class.push(Some(v)),
            Err(Error::InvalidArgument(msg)) => {
                log::debug!("{} undefined for class {}: {}", name, k, msg);
                per_class.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::invalid(format!("{} undefined for every class", name)));
    }
    Ok(MacroScore {
        mean: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class,
    })
}

impl MacroScore {
    /// Logs a warning naming every class excluded from the mean.
    pub fn warn_undefined(&self, metric: &str, names: &[String]) {
        for (k, v) in self.per_class.iter().enumerate() {
            if v.is_none() {
                let name = names.get(k).cloned().unwrap_or_else(|| k.to_string());
                log::warn!("{} undefined for class {}; excluded from the macro mean", metric, name);
            }
        }
    }
}

/// Macro AUROC over the columns of an `n × C` score matrix.
pub fn auroc_macro(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MacroScore> {
    macro_over("AUROC", scores, labels, auroc)
}

pub fn auprc_macro(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MacroScore> {
    macro_over("AUPRC", scores, labels, auprc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert!(auroc(&[0.5, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auprc_cases() {
        assert_eq!(auprc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        let ap = auprc(&[0.9, 0.8, 0.7, 0.6], &[false, false, true, false]).unwrap();
        assert!((ap - 1.0 / 3.0).abs() < 1e-15);
        assert!(auprc(&[0.1], &[false]).is_err());
    }

    #[test]
    fn macro_skips_undefined() {
        let s = vec![vec![0.1, 0.3], vec![0.9, 0.2]];
        let l = vec![vec![false, true], vec![true, true]];
        let m = auroc_macro(&s, &l).unwrap();
        assert_eq!(m.per_class, vec![Some(1.0), None]);
        assert_eq!(m.mean, 1.0);
    }
}
