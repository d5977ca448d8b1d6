use super::ranking::average_ranks;
use crate::error::{Error, Result};
use crate::rng::stream;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

/// Largest per-side sample size handled by exact enumeration.
pub const MW_EXACT_MAX: usize = 8;

/// Percentile with linear interpolation between order statistics
/// (position `q·(n−1)` in the sorted sample).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty() && (0.0..=1.0).contains(&q));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub low: f64,
    pub high: f64,
    pub level: f64,
    pub resamples: usize,
    pub seed: u64,
}

/// Percentile bootstrap interval of `statistic` over `n` observations.
///
/// Each replicate draws `n` indices with replacement from its own stream
/// `(seed, replicate)` and evaluates `statistic` on them; replicates where
/// the statistic is undefined (returns an error) are redrawn.
pub fn bootstrap_ci<F>(n: usize, statistic: F, resamples: usize, level: f64, seed: u64) -> Result<BootstrapCi>
where
    F: Fn(&[usize]) -> Result<f64>,
{
    if resamples < 1 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    if n < 2 {
        return Err(Error::invalid("bootstrap needs at least two observations"));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::invalid("confidence level must lie in (0, 1)"));
    }
    let mut reps = Vec::with_capacity(resamples);
    for b in 0..resamples {
        let mut rng = stream(seed, &[0xb007, b as u64]);
        let mut attempts = 0;
        loop {
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            match statistic(&idx) {
                Ok(v) => {
                    reps.push(v);
                    break;
                }
                Err(e) if attempts < 100 => {
                    attempts += 1;
                    log::debug!("bootstrap replicate {} redrawn: {}", b, e);
                }
                Err(e) => return Err(e),
            }
        }
    }
    reps.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(BootstrapCi {
        low: percentile(&reps, alpha),
        high: percentile(&reps, 1.0 - alpha),
        level,
        resamples,
        seed,
    })
}

/// Convenience: bootstrap interval of the sample mean.
pub fn bootstrap_mean_ci(samples: &[f64], resamples: usize, level: f64, seed: u64) -> Result<BootstrapCi> {
    bootstrap_ci(
        samples.len(),
        |idx| Ok(idx.iter().map(|&i| samples[i]).sum::<f64>() / idx.len() as f64),
        resamples,
        level,
        seed,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test: String,
    pub statistic: f64,
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch's unequal-variance two-sided t-test.
pub fn t_test(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("t-test needs at least two values per group"));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    let test = "welch_t".to_string();
    if se2 == 0.0 {
        return Ok(if ma == mb {
            TestResult { test, statistic: 0.0, p: 1.0 }
        } else {
            TestResult {
                test,
                statistic: if ma > mb { f64::MAX } else { f64::MIN },
                p: 0.0,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TestResult { test, statistic: t, p })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// `U` for the first group: pairs where `a > b`, ties counting one half.
    pub u: f64,
    pub p: f64,
    pub exact: bool,
}

/// Two-sided Mann-Whitney U test.
///
/// With both groups of size ≤ [`MW_EXACT_MAX`], `p` is the exact
/// permutation probability of a `U` at least as far from its mean as the
/// observed one (ties handled through the pooled average ranks). Larger
/// samples use the normal approximation with tie-corrected variance and a
/// 0.5 continuity correction.
pub fn mann_whitney(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    check_groups(a, b)?;
    let (na, nb) = (a.len(), b.len());
    if na > MW_EXACT_MAX || nb > MW_EXACT_MAX {
        return mann_whitney_normal(a, b);
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let shift = (na * (na + 1)) as f64 / 2.0;
    let u = ranks[..na].iter().sum::<f64>() - shift;
    let p = exact_p(&ranks, na, u, (na * nb) as f64 / 2.0, shift);
    Ok(MannWhitney { u, p, exact: true })
}

fn check_groups(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("Mann-Whitney needs nonempty groups"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "mann_whitney" });
    }
    Ok(())
}

/// Normal-approximation branch of [`mann_whitney`] at any sample size.
pub fn mann_whitney_normal(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    check_groups(a, b)?;
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let u = ranks[..na].iter().sum::<f64>() - (na * (na + 1)) as f64 / 2.0;
    let mean = (na * nb) as f64 / 2.0;
    let n = (na + nb) as f64;
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(MannWhitney { u, p: 1.0, exact: false });
    }
    let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = (2.0 * (1.0 - normal.cdf(z))).min(1.0);
    Ok(MannWhitney { u, p, exact: false })
}

/// Enumerates every way of choosing which `na` pooled ranks belong to the
/// first group.
fn exact_p(ranks: &[f64], na: usize, u_obs: f64, mean: f64, shift: f64) -> f64 {
    let n = ranks.len();
    let observed = (u_obs - mean).abs();
    let tol = 1e-9;
    let (mut extreme, mut total) = (0u64, 0u64);
    let mut chosen = Vec::with_capacity(na);
    fn rec(
        start: usize,
        left: usize,
        n: usize,
        chosen: &mut Vec<usize>,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if left == 0 {
            visit(chosen);
            return;
        }
        for i in start..=n - left {
            chosen.push(i);
            rec(i + 1, left - 1, n, chosen, visit);
            chosen.pop();
        }
    }
    rec(0, na, n, &mut chosen, &mut |c| {
        let u = c.iter().map(|&i| ranks[i]).sum::<f64>() - shift;
        total += 1;
        if (u - mean).abs() >= observed - tol {
            extreme += 1;
        }
    });
    extreme as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&s, 0.5), 3.0);
        assert_eq!(percentile(&s, 0.1), 1.4);
    }

    #[test]
    fn bootstrap_constant_is_degenerate() {
        let ci = bootstrap_mean_ci(&[2.5; 10], 50, 0.95, 1).unwrap();
        assert_eq!((ci.low, ci.high), (2.5, 2.5));
        assert!(bootstrap_mean_ci(&[1.0, 2.0], 0, 0.95, 1).is_err());
    }

    #[test]
    fn t_test_limits() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(t_test(&a, &a).unwrap().p, 1.0);
        let z: Vec<f64> = (0..5).map(|i| i as f64 * 1e-9).collect();
        let o: Vec<f64> = z.iter().map(|v| 1.0 + v).collect();
        assert!(t_test(&z, &o).unwrap().p < 1e-5);
        assert_eq!(t_test(&[1.0, 1.0], &[1.0, 1.0]).unwrap().p, 1.0);
    }

    #[test]
    fn mann_whitney_exact_cases() {
        let r = mann_whitney(&[1.0], &[1.0]).unwrap();
        assert!(r.exact && r.p == 1.0);
        let r = mann_whitney(&[6.0, 7.0, 8.0, 9.0, 10.0], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(r.u, 25.0);
        assert!((r.p - 2.0 / 252.0).abs() < 1e-15);
    }
}
