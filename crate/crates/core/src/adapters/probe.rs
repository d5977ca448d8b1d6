use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Full-batch Adam settings for the multinomial logistic probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 300, lr: 0.05, l2: 1e-4 }
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Row-major `[classes, dim]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: usize,
}

impl LinearProbe {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let z: Vec<f64> = x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect();
        (0..self.classes)
            .map(|c| self.bias[c] + self.weight[c * d..(c + 1) * d].iter().zip(&z).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let l = self.logits(x);
        (0..l.len()).fold(0, |best, c| if l[c] > l[best] { c } else { best })
    }

    /// Fraction of rows whose prediction equals the label.
    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = features.iter().zip(labels).filter(|(x, &y)| self.predict(x) == y).count();
        hits as f64 / labels.len().max(1) as f64
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

/// Fits the probe by full-batch Adam on mean cross-entropy plus an L2
/// penalty on the weights. Standardization statistics come from `features`.
pub fn fit_linear_probe(features: &[Vec<f64>], labels: &[usize], cfg: &ProbeConfig) -> Result<LinearProbe> {
    let n = features.len();
    if n == 0 || labels.len() != n {
        return Err(Error::invalid("probe needs nonempty aligned features and labels"));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::shape("linear_probe", "ragged feature rows"));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    if classes < 2 {
        return Err(Error::invalid("probe needs at least two classes"));
    }
    let mut mean = vec![0.0; d];
    for f in features {
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut scale = vec![0.0; d];
    for f in features {
        scale.iter_mut().zip(f).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n as f64);
    }
    scale.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
        .collect();

    let mut probe = LinearProbe { mean, scale, weight: vec![0.0; classes * d], bias: vec![0.0; classes], classes };
    let np = classes * d + classes;
    let (mut m1, mut m2) = (vec![0.0; np], vec![0.0; np]);
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    for t in 1..=cfg.epochs {
        let mut grad = vec![0.0; np];
        for (x, &y) in z.iter().zip(labels) {
            let mut p: Vec<f64> = (0..classes)
                .map(|c| probe.bias[c] + probe.weight[c * d..(c + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
                .collect();
            softmax_in_place(&mut p);
            p[y] -= 1.0;
            for c in 0..classes {
                let g = p[c] / n as f64;
                grad[c * d..(c + 1) * d].iter_mut().zip(x).for_each(|(gw, v)| *gw += g * v);
                grad[classes * d + c] += g;
            }
        }
        for i in 0..classes * d {
            grad[i] += cfg.l2 * probe.weight[i];
        }
        let c1 = 1.0 - f64::powi(b1, t as i32);
        let c2 = 1.0 - f64::powi(b2, t as i32);
        for i in 0..np {
            m1[i] = b1 * m1[i] + (1.0 - b1) * grad[i];
            m2[i] = b2 * m2[i] + (1.0 - b2) * grad[i] * grad[i];
            let step = cfg.lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
            if i < classes * d {
                probe.weight[i] -= step;
            } else {
                probe.bias[i - classes * d] -= step;
            }
        }
    }
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_clusters_are_learned() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..60 {
            let c = i % 3;
            let jitter = (i as f64 * 0.37).sin() * 0.1;
            let mut x = vec![jitter; 4];
            x[c] += 5.0;
            xs.push(x);
            ys.push(c);
        }
        let p = fit_linear_probe(&xs, &ys, &ProbeConfig::default()).unwrap();
        assert_eq!(p.accuracy(&xs, &ys), 1.0);
    }

    #[test]
    fn constant_feature_does_not_divide_by_zero() {
        let xs = vec![vec![1.0, 0.0], vec![1.0, 1.0]];
        let p = fit_linear_probe(&xs, &[0, 1], &ProbeConfig::default()).unwrap();
        assert!(p.weight.iter().all(|w| w.is_finite()));
        assert!(fit_linear_probe(&xs, &[0, 0], &ProbeConfig::default()).is_err());
    }
}
