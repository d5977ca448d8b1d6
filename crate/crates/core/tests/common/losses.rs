use super::cross_entropy;
use rand::Rng;
use xrss::rng::stream;
use xrss::ssl::{dino_loss, ibot_loss, koleo_loss, MaskPlan, Temperatures, KOLEO_EPS};
use xrss::{Graph, Tensor};

const TOL: f64 = 1e-12;
const INSTANCES: u64 = 100;

fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new([rows, cols], (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * b.abs().max(1.0)
}

pub fn dino_matches_direct_summation() {
    for inst in 0..INSTANCES {
        let mut rng = stream(11, &[inst]);
        let (b, k) = (rng.gen_range(1..5), rng.gen_range(2..12));
        let n_global = rng.gen_range(1..3);
        let n_views = n_global + rng.gen_range(1..4);
        let temps = Temperatures { student: rng.gen_range(0.05..0.5), teacher: rng.gen_range(0.02..0.2) };
        let center: Vec<f64> = (0..k).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let students: Vec<Tensor> = (0..n_views).map(|_| random_tensor(&mut rng, b, k, 2.0)).collect();
        let teachers: Vec<Tensor> = (0..n_global).map(|_| random_tensor(&mut rng, b, k, 2.0)).collect();

        let mut g = Graph::new();
        let vars: Vec<_> = students.iter().map(|s| g.param(s.clone())).collect();
        let loss = dino_loss(&mut g, &vars, &teachers, &center, temps).unwrap();
        let got = g.value(loss).item().unwrap();

        let mut total = 0.0;
        let mut pairs = 0;
        for (ti, t) in teachers.iter().enumerate() {
            for (si, s) in students.iter().enumerate() {
                if si == ti {
                    continue;
                }
                let mut acc = 0.0;
                for r in 0..b {
                    acc += cross_entropy(t.row(r), s.row(r), &center, temps);
                }
                total += acc / b as f64;
                pairs += 1;
            }
        }
        let want = total / pairs as f64;
        assert!(close(got, want), "instance {}: {} vs {}", inst, got, want);
    }
}

pub fn ibot_matches_direct_summation() {
    for inst in 0..INSTANCES {
        let mut rng = stream(12, &[inst]);
        let (rows, cols, k) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(2..10));
        let p = rows * cols;
        let images = rng.gen_range(1..4);
        let temps = Temperatures { student: rng.gen_range(0.05..0.5), teacher: rng.gen_range(0.02..0.2) };
        let center: Vec<f64> = (0..k).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let students: Vec<Tensor> = (0..images).map(|_| random_tensor(&mut rng, p, k, 2.0)).collect();
        let teachers: Vec<Tensor> = (0..images).map(|_| random_tensor(&mut rng, p, k, 2.0)).collect();
        let mut plans: Vec<MaskPlan> = (0..images)
            .map(|_| MaskPlan { rows, cols, mask: (0..p).map(|_| rng.gen_bool(0.4)).collect() })
            .collect();
        if plans.iter().all(|m| m.is_empty()) {
            plans[0].mask[0] = true;
        }

        let mut g = Graph::new();
        let vars: Vec<_> = students.iter().map(|s| g.param(s.clone())).collect();
        let (loss, _) = ibot_loss(&mut g, &vars, &teachers, &plans, &center, temps).unwrap();
        let got = g.value(loss).item().unwrap();

        let mut total = 0.0;
        let mut count = 0;
        for i in 0..images {
            for pos in 0..p {
                if plans[i].mask[pos] {
                    total += cross_entropy(teachers[i].row(pos), students[i].row(pos), &center, temps);
                    count += 1;
                }
            }
        }
        let want = total / count as f64;
        assert!(close(got, want), "instance {}: {} vs {}", inst, got, want);
    }
}

pub fn koleo_matches_brute_force() {
    for inst in 0..INSTANCES {
        let mut rng = stream(13, &[inst]);
        let (n, d) = (rng.gen_range(2..10), rng.gen_range(1..6));
        let x = random_tensor(&mut rng, n, d, 1.0);

        let mut g = Graph::new();
        let v = g.param(x.clone());
        let loss = koleo_loss(&mut g, v).unwrap();
        let got = g.value(loss).item().unwrap();

        let unit: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let r = x.row(i);
                let norm = r.iter().map(|a| a * a).sum::<f64>().sqrt();
                r.iter().map(|a| a / norm).collect()
            })
            .collect();
        let mut total = 0.0;
        for i in 0..n {
            let nearest = (0..n)
                .filter(|&j| j != i)
                .map(|j| unit[i].iter().zip(&unit[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min);
            total += (nearest + KOLEO_EPS).ln();
        }
        let want = -total / n as f64;
        assert!(close(got, want), "instance {}: {} vs {}", inst, got, want);
    }
}

pub fn uniform_logits_give_log_k() {
    let temps = Temperatures { student: 0.1, teacher: 0.04 };
    for k in [2usize, 7, 65536] {
        let mut g = Graph::new();
        let s = g.param(Tensor::full([3, k], 0.25));
        let t = Tensor::full([3, k], -1.5);
        let loss = dino_loss(&mut g, &[s, s], &[t], &vec![0.0; k], temps).unwrap();
        let got = g.value(loss).item().unwrap();
        // rounding in a K-term sum grows with K
        let tol = TOL * (k as f64 / 64.0).max(1.0);
        assert!((got - (k as f64).ln()).abs() <= tol * got.abs(), "K = {}: {}", k, got);
    }
}

pub fn uniform_teacher_against_peaked_student_exceeds_log_k() {
    let k = 8;
    let temps = Temperatures { student: 0.1, teacher: 0.04 };
    let mut g = Graph::new();
    let mut peaked = vec![0.0; k];
    peaked[3] = 1.0;
    let s = g.param(Tensor::new([1, k], peaked).unwrap());
    let loss = dino_loss(&mut g, &[s, s], &[Tensor::zeros([1, k])], &vec![0.0; k], temps).unwrap();
    assert!(g.value(loss).item().unwrap() > (k as f64).ln());
}

pub fn empty_mask_gives_zero() {
    let temps = Temperatures { student: 0.1, teacher: 0.04 };
    let mut g = Graph::new();
    let s = g.param(Tensor::full([4, 3], 1.0));
    let (loss, status) =
        ibot_loss(&mut g, &[s], &[Tensor::zeros([4, 3])], &[MaskPlan::empty(2, 2)], &[0.0; 3], temps).unwrap();
    assert_eq!(g.value(loss).item().unwrap(), 0.0);
    assert_eq!(status, xrss::ssl::MaskStatus::EmptyMask);
}

pub fn antipodal_pair_gives_minus_log_two() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new([2, 3], vec![0.0, 3.0, 0.0, 0.0, -0.5, 0.0]).unwrap());
    let loss = koleo_loss(&mut g, x).unwrap();
    let got = g.value(loss).item().unwrap();
    assert!(close(got, -(2.0 + KOLEO_EPS).ln()));
    assert!((got + 2f64.ln()).abs() < 1e-8);
}
