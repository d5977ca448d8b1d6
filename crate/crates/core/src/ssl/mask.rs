use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Patch positions hidden from the student, row-major over the grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub rows: usize,
    pub cols: usize,
    pub mask: Vec<bool>,
}

impl MaskPlan {
    pub fn empty(rows: usize, cols: usize) -> Self {
        MaskPlan {
            rows,
            cols,
            mask: vec![false; rows * cols],
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Flat indices of masked positions in increasing order.
    pub fn indices(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

const BLOCK_ASPECT: f64 = 0.3;
const MIN_BLOCK: usize = 2;

/// Blockwise masking of exactly `round(ratio · rows · cols)` positions.
///
/// Rectangular blocks with log-uniform aspect ratio in `[0.3, 1/0.3]` are
/// placed until the target is met; a block that would overshoot contributes
/// only its first positions in raster order, and if block placement stalls
/// the remainder is filled with uniformly chosen single positions.
pub fn mask_patches<R: Rng + ?Sized>(rows: usize, cols: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {} outside [0, 1)", ratio)));
    }
    let n = rows * cols;
    let target = (ratio * n as f64).round() as usize;
    let mut plan = MaskPlan::empty(rows, cols);
    let mut count = 0;
    let mut stalls = 0;
    while count < target && stalls < 10 {
        let remaining = target - count;
        let area = rng.gen_range(MIN_BLOCK.min(remaining)..=remaining) as f64;
        let aspect = rng.gen_range(BLOCK_ASPECT.ln()..(1.0 / BLOCK_ASPECT).ln()).exp();
        let h = ((area * aspect).sqrt().round() as usize).clamp(1, rows);
        let w = ((area / aspect).sqrt().round() as usize).clamp(1, cols);
        let top = rng.gen_range(0..=rows - h);
        let left = rng.gen_range(0..=cols - w);
        let mut added = 0;
        'block: for r in top..top + h {
            for c in left..left + w {
                if count == target {
                    break 'block;
                }
                let i = r * cols + c;
                if !plan.mask[i] {
                    plan.mask[i] = true;
                    count += 1;
                    added += 1;
                }
            }
        }
        if added == 0 {
            stalls += 1;
        }
    }
    while count < target {
        let i = rng.gen_range(0..n);
        if !plan.mask[i] {
            plan.mask[i] = true;
            count += 1;
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn counts_are_exact() {
        let mut rng = stream(4, &[]);
        assert!(mask_patches(14, 14, 0.0, &mut rng).unwrap().is_empty());
        assert_eq!(mask_patches(14, 14, 0.5, &mut rng).unwrap().count(), 98);
        for k in 0..200 {
            let r = (k as f64) / 200.0;
            let p = mask_patches(4, 4, r, &mut rng).unwrap();
            assert_eq!(p.count(), (r * 16.0).round() as usize);
        }
        assert!(mask_patches(4, 4, 1.0, &mut rng).is_err());
        assert!(mask_patches(4, 4, -0.1, &mut rng).is_err());
    }

    #[test]
    fn deterministic() {
        let a = mask_patches(14, 14, 0.3, &mut stream(5, &[2])).unwrap();
        let b = mask_patches(14, 14, 0.3, &mut stream(5, &[2])).unwrap();
        assert_eq!(a, b);
    }
}
