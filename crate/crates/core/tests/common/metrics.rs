use super::{auprc_steps, auroc_pairs, mw_enumeration, mw_monte_carlo, u_pairs};
use rand::Rng;
use xrss::metrics::{
    auprc, auroc, bleu4, dice_per_class, mann_whitney, pearson_r, rouge_l, t_test, tokenize, MW_EXACT_MAX,
};
use xrss::rng::stream;

fn random_scored<R: Rng>(rng: &mut R, n: usize, levels: u32) -> (Vec<f64>, Vec<bool>) {
    let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
    (scores, labels)
}

pub fn auroc_equals_pair_counting() {
    for inst in 0..200 {
        let mut rng = stream(21, &[inst]);
        let n = rng.gen_range(2..=100);
        let (s, l) = random_scored(&mut rng, n, if inst % 2 == 0 { 5 } else { 1000 });
        assert_eq!(auroc(&s, &l).unwrap(), auroc_pairs(&s, &l), "instance {}", inst);
    }
}

pub fn auprc_equals_step_summation() {
    for inst in 0..200 {
        let mut rng = stream(22, &[inst]);
        let n = rng.gen_range(2..=100);
        let (s, l) = random_scored(&mut rng, n, if inst % 2 == 0 { 4 } else { 1000 });
        let (got, want) = (auprc(&s, &l).unwrap(), auprc_steps(&s, &l));
        assert!((got - want).abs() < 1e-12, "instance {}: {} vs {}", inst, got, want);
    }
}

pub fn dice_equals_pixel_counting() {
    for inst in 0..100 {
        let mut rng = stream(23, &[inst]);
        let (n, classes) = (rng.gen_range(1..200), rng.gen_range(1..5));
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let gt: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let got = dice_per_class(&pred, &gt, classes).unwrap();
        for c in 0..classes {
            let both = (0..n).filter(|&i| pred[i] == c && gt[i] == c).count();
            let size = (0..n).filter(|&i| pred[i] == c).count() + (0..n).filter(|&i| gt[i] == c).count();
            let want = if size == 0 { 1.0 } else { 2.0 * both as f64 / size as f64 };
            assert_eq!(got[c], want, "instance {} class {}", inst, c);
        }
    }
}

pub fn mann_whitney_exact_matches_enumeration() {
    for inst in 0..60 {
        let mut rng = stream(24, &[inst]);
        let na = rng.gen_range(1..=MW_EXACT_MAX);
        let nb = rng.gen_range(1..=MW_EXACT_MAX);
        let levels = if inst % 3 == 0 { 3 } else { 100 };
        let a: Vec<f64> = (0..na).map(|_| rng.gen_range(0..levels) as f64).collect();
        let b: Vec<f64> = (0..nb).map(|_| rng.gen_range(0..levels) as f64 + 0.5 * (inst % 2) as f64).collect();
        let r = mann_whitney(&a, &b).unwrap();
        assert!(r.exact);
        assert_eq!(r.u, u_pairs(&a, &b));
        let want = mw_enumeration(&a, &b);
        assert!((r.p - want).abs() < 1e-12, "instance {}: {} vs {}", inst, r.p, want);
    }
}

pub fn mann_whitney_normal_branch_matches_permutations() {
    for (inst, (na, nb, shift, levels)) in [(20, 20, 0.3, 1000), (15, 30, 0.5, 6), (12, 9, 0.0, 1000), (40, 25, 0.2, 10)]
        .into_iter()
        .enumerate()
    {
        let mut rng = stream(25, &[inst as u64]);
        let a: Vec<f64> = (0..na).map(|_| (rng.gen_range(0..levels) as f64 / levels as f64) + shift).collect();
        let b: Vec<f64> = (0..nb).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let r = mann_whitney(&a, &b).unwrap();
        assert!(!r.exact);
        let mc = mw_monte_carlo(&a, &b, 100_000, 26 + inst as u64);
        assert!((r.p - mc).abs() <= 0.02, "case {}: normal {} vs permutation {}", inst, r.p, mc);
    }
}

pub fn welch_matches_reference_values() {
    let a = [2.1, 3.4, 1.9, 5.0, 4.2, 3.3];
    let b = [1.0, 0.4, 2.2, 1.8, 0.9, 1.1, 1.5, 0.7];
    let r = t_test(&a, &b).unwrap();
    assert!((r.statistic - 3.991365734095322).abs() < 1e-12);
    assert!((r.p - 0.005448499033600606).abs() < 1e-9);
    let r = t_test(&[0.5, 0.51, 0.49, 0.52], &[0.3, 0.9, 0.1, 0.7, 0.6]).unwrap();
    assert!((r.statistic + 0.10491391847339188).abs() < 1e-12);
    assert!((r.p - 0.9214749314092344).abs() < 1e-9);
}

pub fn pearson_matches_reference_value() {
    let r = pearson_r(&[1.0, 2.0, 3.5, 4.0, 7.5], &[2.0, 1.5, 4.0, 6.0, 8.0]).unwrap();
    assert!((r - 0.9435900586238704).abs() < 1e-12);
}

pub fn text_scores_match_reference_values() {
    let reference = tokenize("Heart size is normal. The lungs are clear");
    let candidate = tokenize("the heart size is normal and lungs are clear");
    assert!((bleu4(&candidate, &reference) - 0.44632361378533286).abs() < 1e-12);
    let short = tokenize("heart size is normal");
    assert!((rouge_l(&short, &reference) - 0.5754716981132075).abs() < 1e-12);
    assert_eq!(rouge_l(&candidate, &candidate), 1.0);
}
