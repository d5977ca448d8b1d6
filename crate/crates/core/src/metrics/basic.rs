use crate::error::{Error, Result};

/// Guard in the SMAPE denominator.
pub const SMAPE_EPS: f64 = 1e-8;

/// Per-class Dice `2|P∩G| / (|P|+|G|)` on label maps, `1.0` for a class
/// absent from both, plus the macro mean.
pub fn dice_per_class(pred: &[usize], gt: &[usize], classes: usize) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::shape("dice", format!("{} vs {} pixels", pred.len(), gt.len())));
    }
    if pred.iter().chain(gt).any(|&c| c >= classes) {
        return Err(Error::invalid("label outside the class range"));
    }
    let mut inter = vec![0usize; classes];
    let mut p = vec![0usize; classes];
    let mut g = vec![0usize; classes];
    for (&a, &b) in pred.iter().zip(gt) {
        p[a] += 1;
        g[b] += 1;
        if a == b {
            inter[a] += 1;
        }
    }
    Ok((0..classes)
        .map(|c| {
            if p[c] + g[c] == 0 {
                1.0
            } else {
                2.0 * inter[c] as f64 / (p[c] + g[c]) as f64
            }
        })
        .collect())
}

pub fn dice_macro(pred: &[usize], gt: &[usize], classes: usize) -> Result<f64> {
    let d = dice_per_class(pred, gt, classes)?;
    Ok(d.iter().sum::<f64>() / classes as f64)
}

/// Mean per-class recall over the classes present in `gt`.
pub fn macro_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::shape("macro_accuracy", "predictions and targets must be nonempty and aligned"));
    }
    let classes = pred.iter().chain(gt).max().map_or(0, |&m| m + 1);
    let mut hit = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        count[g] += 1;
        if p == g {
            hit[g] += 1;
        }
    }
    let recalls: Vec<f64> = (0..classes)
        .filter(|&c| {
            if count[c] == 0 {
                log::debug!("class {} absent from targets; excluded from macro accuracy", c);
            }
            count[c] > 0
        })
        .map(|c| hit[c] as f64 / count[c] as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Pearson correlation coefficient.
pub fn pearson_r(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() < 2 {
        return Err(Error::invalid("pearson needs at least two aligned pairs"));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mg = gt.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        sxy += (p - mp) * (g - mg);
        sxx += (p - mp) * (p - mp);
        syy += (g - mg) * (g - mg);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("pearson undefined for zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Square of [`pearson_r`].
pub fn r_squared(pred: &[f64], gt: &[f64]) -> Result<f64> {
    Ok(pearson_r(pred, gt)?.powi(2))
}

/// Mean of `|p − g| / ((|p| + |g|)/2 + ε)`.
pub fn smape(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid("smape needs nonempty aligned inputs"));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p - g).abs() / ((p.abs() + g.abs()) / 2.0 + SMAPE_EPS))
        .sum::<f64>()
        / pred.len() as f64)
}
