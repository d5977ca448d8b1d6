//! Central finite-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of [`relative_error`]. Below this magnitude the
/// comparison degrades gracefully to an absolute one.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub passed: bool,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: Option<usize>,
    pub checked: usize,
}

/// Checks every coordinate of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64, tolerance: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_coords(f, x, &coords, h, tolerance)
}

/// Checks the listed coordinates of `x` against central differences.
pub fn finite_diff_check_coords<F>(
    f: F,
    x: &Tensor,
    coords: &[usize],
    h: f64,
    tolerance: f64,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    let mut g = Graph::new();
    let input = g.param(x.clone());
    let out = f(&mut g, input)?;
    if g.value(out).numel() != 1 {
        return Err(Error::NonScalarLoss(g.shape(out).to_vec()));
    }
    let grads = g.backward(out)?;
    let analytic = grads
        .get(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(x.shape().to_vec(), data)?);
        let out = f(&mut g, v)?;
        g.value(out).item()
    };

    let mut worst = (0.0f64, None);
    for &i in coords {
        if i >= x.numel() {
            return Err(Error::invalid(format!("coordinate {} out of range", i)));
        }
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = relative_error(analytic.data()[i], numeric);
        if err > worst.0 || worst.1.is_none() {
            worst = (err, Some(i));
        }
    }
    Ok(GradCheck {
        passed: worst.0 < tolerance,
        max_rel_error: worst.0,
        worst_index: worst.1,
        checked: coords.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::new([5], vec![0.3, -1.2, 2.0, 0.01, -0.7]).unwrap();
        let r = finite_diff_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                g.sum(sq)
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{:?}", r);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let r = finite_diff_check(|g, v| g.exp(v), &x, 1e-5, 1e-6);
        assert!(matches!(r, Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn corrupted_backward_fails() {
        // Mixing the input with a constant copy of itself hides half of the
        // dependency from the tape, mimicking a wrong backward rule.
        let x = Tensor::new([3], vec![0.4, -0.3, 1.1]).unwrap();
        let r = finite_diff_check(
            |g, v| {
                let frozen = g.constant(g.value(v).clone());
                let prod = g.mul(v, frozen)?;
                g.sum(prod)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.4);
    }
}
