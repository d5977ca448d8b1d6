use super::mask::MaskPlan;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Guard inside the KoLeo logarithm.
pub const KOLEO_EPS: f64 = 1e-8;

/// Student and teacher softmax temperatures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub student: f64,
    pub teacher: f64,
}

impl Temperatures {
    fn validate(&self) -> Result<()> {
        if !(self.student > 0.0 && self.teacher > 0.0) {
            return Err(Error::invalid("temperatures must be positive"));
        }
        Ok(())
    }
}

/// Row-wise `softmax((z − c) / τ)` of teacher logits, computed outside any graph.
pub fn teacher_probs(logits: &Tensor, center: &[f64], temperature: f64) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    let k = *logits.shape().last().unwrap_or(&0);
    if k == 0 || center.len() != k {
        return Err(Error::shape("teacher_probs", format!("{} logits vs center of {}", k, center.len())));
    }
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(k) {
        let shifted: Vec<f64> = row.iter().zip(center).map(|(z, c)| (z - c) / temperature).collect();
        let m = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = shifted.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean over rows of `−Σ_k p_k · log softmax(z / τ_s)_k`.
fn soft_cross_entropy(g: &mut Graph, student: Var, target: &Tensor, tau: f64) -> Result<Var> {
    if g.shape(student) != target.shape() {
        return Err(Error::shape(
            "cross_entropy",
            format!("student {:?} vs teacher {:?}", g.shape(student), target.shape()),
        ));
    }
    let rows = target.rows();
    let logp = g.log_softmax(student, tau)?;
    let p = g.constant(target.clone());
    let prod = g.mul(logp, p)?;
    let total = g.sum(prod)?;
    g.scale(total, -1.0 / rows as f64)
}

/// Self-distillation loss.
///
/// `student` holds one `[B, K]` logit block per view, global views first;
/// `teacher` holds one `[B, K]` block per global view. The loss averages
/// the cross-entropy over every pair (teacher view `t`, student view `s`)
/// with `s ≠ t`; teacher targets are constants.
pub fn dino_loss(
    g: &mut Graph,
    student: &[Var],
    teacher: &[Tensor],
    center: &[f64],
    temps: Temperatures,
) -> Result<Var> {
    temps.validate()?;
    if teacher.is_empty() || student.is_empty() {
        return Err(Error::invalid("dino loss needs at least one teacher and one student view"));
    }
    let targets = teacher
        .iter()
        .map(|t| teacher_probs(t, center, temps.teacher))
        .collect::<Result<Vec<_>>>()?;
    let mut terms = Vec::new();
    for (ti, target) in targets.iter().enumerate() {
        for (si, &s) in student.iter().enumerate() {
            if si == ti {
                continue;
            }
            terms.push(soft_cross_entropy(g, s, target, temps.student)?);
        }
    }
    if terms.is_empty() {
        return Err(Error::invalid("no (teacher, student) view pair with distinct views"));
    }
    let n = terms.len();
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / n as f64)
}

/// Whether the masked-patch loss had anything to average.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskStatus {
    Active(usize),
    EmptyMask,
}

/// Masked-patch loss over a batch of per-image grids.
///
/// `student[i]` and `teacher[i]` are `[P, K]` logits for image `i` (row-major
/// grid); only the positions flagged in `plans[i]` contribute. The result
/// is the mean over all masked positions in the batch, or a constant zero
/// flagged [`MaskStatus::EmptyMask`] when nothing is masked.
pub fn ibot_loss(
    g: &mut Graph,
    student: &[Var],
    teacher: &[Tensor],
    plans: &[MaskPlan],
    center: &[f64],
    temps: Temperatures,
) -> Result<(Var, MaskStatus)> {
    if student.len() != teacher.len() || student.len() != plans.len() {
        return Err(Error::invalid("ibot loss needs one student grid, teacher grid and plan per image"));
    }
    let mut picked_s = Vec::new();
    let mut picked_t = Vec::new();
    for ((&s, t), plan) in student.iter().zip(teacher).zip(plans) {
        if g.shape(s) != t.shape() || t.shape().first() != Some(&plan.mask.len()) {
            return Err(Error::shape("ibot_loss", "logit grids and mask plan disagree"));
        }
        let idx = plan.indices();
        if idx.is_empty() {
            continue;
        }
        picked_s.push(g.select_rows(s, &idx)?);
        let k = t.shape()[1];
        let mut rows = Vec::with_capacity(idx.len() * k);
        for &i in &idx {
            rows.extend_from_slice(t.row(i));
        }
        picked_t.push(Tensor::new([idx.len(), k], rows)?);
    }
    if picked_s.is_empty() {
        return Ok((g.constant(Tensor::scalar(0.0)), MaskStatus::EmptyMask));
    }
    let s = if picked_s.len() == 1 { picked_s[0] } else { g.concat(&picked_s, 0)? };
    let k = picked_t[0].shape()[1];
    let t_rows: Vec<f64> = picked_t.iter().flat_map(|t| t.data().iter().copied()).collect();
    let n = t_rows.len() / k;
    let t = Tensor::new([n, k], t_rows)?;
    Ok((masked_cross_entropy(g, s, &t, center, temps)?, MaskStatus::Active(n)))
}

/// Mean cross-entropy between already-selected student rows `[M, K]` and
/// the matching teacher rows.
pub fn masked_cross_entropy(
    g: &mut Graph,
    student_rows: Var,
    teacher_rows: &Tensor,
    center: &[f64],
    temps: Temperatures,
) -> Result<Var> {
    temps.validate()?;
    let target = teacher_probs(teacher_rows, center, temps.teacher)?;
    soft_cross_entropy(g, student_rows, &target, temps.student)
}

/// `c ← m·c + (1 − m)·mean_rows(logits)`.
pub fn update_center(center: &[f64], logits: &Tensor, momentum: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::invalid("center momentum must lie in [0, 1]"));
    }
    let k = center.len();
    if logits.rank() != 2 || logits.shape()[1] != k || logits.shape()[0] == 0 {
        return Err(Error::shape("update_center", format!("{:?} vs center {}", logits.shape(), k)));
    }
    let n = logits.shape()[0] as f64;
    let mut mean = vec![0.0; k];
    for row in logits.data().chunks(k) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    Ok(center
        .iter()
        .zip(&mean)
        .map(|(c, s)| momentum * c + (1.0 - momentum) * (s / n))
        .collect())
}

/// Nearest-neighbor spreading term on L2-normalized rows of `x` (`[n, d]`):
/// `−(1/n) Σ_i log(min_{j≠i} ‖x̂_i − x̂_j‖ + ε)`. Neighbors are chosen by
/// value; ties go to the lowest index.
pub fn koleo_loss(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::invalid("koleo loss needs at least two feature rows"));
    }
    let n = shape[0];
    let xn = g.l2_normalize(x)?;
    let v = g.value(xn);
    let nn: Vec<usize> = (0..n)
        .map(|i| {
            let mut best = (f64::INFINITY, 0);
            for j in (0..n).filter(|&j| j != i) {
                let dist: f64 = v.row(i).iter().zip(v.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            best.1
        })
        .collect();
    let neighbors = g.select_rows(xn, &nn)?;
    let dist = g.row_distance(xn, neighbors)?;
    let shifted = g.add_scalar(dist, KOLEO_EPS)?;
    let logs = g.log(shifted)?;
    let m = g.mean(logs)?;
    g.scale(m, -1.0)
}

/// `θ_t ← λ·θ_t + (1 − λ)·θ_s` for every parameter of `teacher`.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::invalid("EMA momentum must lie in [0, 1]"));
    }
    if !teacher.same_layout(student) {
        return Err(Error::ParamMismatch("teacher and student layouts differ".into()));
    }
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        let data: Vec<f64> = t
            .data()
            .iter()
            .zip(s.data())
            .map(|(a, b)| momentum * a + (1.0 - momentum) * b)
            .collect();
        *t = Tensor::new(t.shape().to_vec(), data)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut r = stream(seed, &[]);
        Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-3.0..3.0)).unwrap()
    }

    fn value(g: &Graph, v: Var) -> f64 {
        g.value(v).item().unwrap()
    }

    const T1: Temperatures = Temperatures { student: 1.0, teacher: 1.0 };

    #[test]
    fn shared_logits_give_entropy() {
        let z = rand_t(&[3, 6], 1);
        let mut g = Graph::new();
        let s0 = g.constant(z.clone());
        let s1 = g.constant(z.clone());
        let l = dino_loss(&mut g, &[s0, s1], &[z.clone(), z.clone()], &[0.0; 6], T1).unwrap();
        let p = teacher_probs(&z, &[0.0; 6], 1.0).unwrap();
        let h: f64 = p.data().iter().map(|q| -q * q.ln()).sum::<f64>() / 3.0;
        assert!((value(&g, l) - h).abs() < 1e-12);
    }

    #[test]
    fn uniform_teacher_bounds() {
        let k = 16;
        let mut g = Graph::new();
        let uniform = Tensor::zeros([4, k]);
        let s_u = g.constant(uniform.clone());
        let s_r = g.constant(rand_t(&[4, k], 2));
        let l = dino_loss(&mut g, &[s_u, s_u], &[uniform.clone()], &[0.0; 16], T1).unwrap();
        assert!((value(&g, l) - (k as f64).ln()).abs() < 1e-12);
        let l = dino_loss(&mut g, &[s_u, s_r], &[uniform], &[0.0; 16], T1).unwrap();
        assert!(value(&g, l) >= (k as f64).ln());
    }

    #[test]
    fn empty_mask_is_flagged_zero() {
        let mut g = Graph::new();
        let s = g.constant(rand_t(&[4, 5], 3));
        let (l, st) =
            ibot_loss(&mut g, &[s], &[rand_t(&[4, 5], 4)], &[MaskPlan::empty(2, 2)], &[0.0; 5], T1).unwrap();
        assert_eq!(value(&g, l), 0.0);
        assert_eq!(st, MaskStatus::EmptyMask);
    }

    #[test]
    fn koleo_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([2, 3], vec![0.0, 2.0, 0.0, 0.0, -5.0, 0.0]).unwrap());
        let l = koleo_loss(&mut g, x).unwrap();
        assert!((value(&g, l) + (2.0 + KOLEO_EPS).ln()).abs() < 1e-15);
        let same = g.constant(Tensor::new([3, 2], vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap());
        let l = koleo_loss(&mut g, same).unwrap();
        assert!((value(&g, l) + KOLEO_EPS.ln()).abs() < 1e-12);
        let one = g.constant(Tensor::new([1, 2], vec![1.0, 0.0]).unwrap());
        assert!(koleo_loss(&mut g, one).is_err());
        let zero = g.constant(Tensor::zeros([2, 2]));
        assert!(koleo_loss(&mut g, zero).is_err());
    }

    #[test]
    fn center_and_ema_limits() {
        let logits = rand_t(&[5, 3], 6);
        let c = vec![1.0, 2.0, 3.0];
        assert_eq!(update_center(&c, &logits, 1.0).unwrap(), c);
        let mean = update_center(&[0.0; 3], &logits, 0.0).unwrap();
        for k in 0..3 {
            let m: f64 = (0..5).map(|i| logits.row(i)[k]).sum::<f64>() / 5.0;
            assert_eq!(mean[k], m);
        }
        let mut t = ParamStore::new();
        t.insert("a", rand_t(&[4], 7));
        let mut s = ParamStore::new();
        s.insert("a", rand_t(&[4], 8));
        let t0 = t.clone();
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t, t0);
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t, s);
        let mut bad = ParamStore::new();
        bad.insert("b", rand_t(&[4], 9));
        assert!(ema_update(&mut t, &bad, 0.5).is_err());
    }
}
