//! Bicubic resampling of the learned positional table.
//!
//! Grid positions are mapped corner-to-corner: target index `t` of an
//! `M`-long axis samples source coordinate `t · (N − 1) / (M − 1)` (the
//! center `(N − 1) / 2` when `M = 1`). Taps use the cubic convolution kernel
//! with `a = −0.75` and clamp at the borders.

use crate::error::{Error, Result};
use crate::tensor::graph::mix_rows_forward;
use crate::tensor::{graph::RowMix, Tensor};

const CUBIC_A: f64 = -0.75;

fn cubic_weight(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        ((CUBIC_A + 2.0) * t - (CUBIC_A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((CUBIC_A * t - 5.0 * CUBIC_A) * t + 8.0 * CUBIC_A) * t - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Taps `(source index, weight)` and nearest source index for each target.
fn axis_taps(source: usize, target: usize) -> Vec<(Vec<(usize, f64)>, usize)> {
    (0..target)
        .map(|t| {
            let s = if target == 1 {
                (source - 1) as f64 / 2.0
            } else {
                t as f64 * (source - 1) as f64 / (target - 1) as f64
            };
            let base = s.floor();
            let frac = s - base;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
            for k in -1i64..=2 {
                let w = cubic_weight(frac - k as f64);
                if w == 0.0 {
                    continue;
                }
                let idx = (base as i64 + k).clamp(0, source as i64 - 1) as usize;
                match taps.iter_mut().find(|(i, _)| *i == idx) {
                    Some(tap) => tap.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            let nearest = (s.round() as usize).min(source - 1);
            (taps, nearest)
        })
        .collect()
}

/// Row mixes that resample an `n × n` row-major grid to `rows × cols`.
pub fn bicubic_mix(n: usize, rows: usize, cols: usize) -> Vec<RowMix> {
    let ty = axis_taps(n, rows);
    let tx = axis_taps(n, cols);
    let mut out = Vec::with_capacity(rows * cols);
    for (yt, yn) in &ty {
        for (xt, xn) in &tx {
            let mut terms = Vec::with_capacity(yt.len() * xt.len());
            for &(yi, wy) in yt {
                for &(xi, wx) in xt {
                    terms.push((yi * n + xi, wy * wx));
                }
            }
            out.push(RowMix {
                anchor: yn * n + xn,
                terms,
            });
        }
    }
    out
}

/// Resamples a positional table of `1 + n²` rows (class-token row first) to
/// a `rows × cols` patch grid. The class-token row passes through unchanged
/// and the table is returned as-is when the grid already matches.
pub fn interpolate_pos_embedding(table: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let n = base_grid_of(table)?;
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("target grid must be non-empty"));
    }
    if rows == n && cols == n {
        return Ok(table.clone());
    }
    let d = table.shape()[1];
    let patch_rows = &table.data()[d..];
    let mixed = mix_rows_forward(patch_rows, d, &bicubic_mix(n, rows, cols));
    let mut data = table.data()[..d].to_vec();
    data.extend(mixed);
    Tensor::new([1 + rows * cols, d], data)
}

/// Side `n` of a table with `1 + n²` rows.
pub fn base_grid_of(table: &Tensor) -> Result<usize> {
    if table.rank() != 2 || table.shape()[0] < 2 {
        return Err(Error::shape("pos_embed", format!("table shape {:?}", table.shape())));
    }
    let p = table.shape()[0] - 1;
    let n = (p as f64).sqrt().round() as usize;
    if n * n != p {
        return Err(Error::shape("pos_embed", format!("{} patch rows is not a square grid", p)));
    }
    Ok(n)
}
