use proptest::prelude::*;
use rand::Rng;
use xrss::adapters::{AdapterHead, AdapterSpec, Pooling, TaskKind};
use xrss::audit::{localization_accuracy, make_group_splits, AttentionMap, BoxAnnotation};
use xrss::augment::{make_views, AugmentConfig};
use xrss::metrics::{auroc, bootstrap_mean_ci, dice_macro, mann_whitney, mann_whitney_normal};
use xrss::rng::stream;
use xrss::ssl::{dino_loss, ibot_loss, koleo_loss, MaskPlan, Temperatures};
use xrss::vit::{encode, init_backbone, ViTConfig};
use xrss::{GrayImage, Graph, Tensor};

fn tensor(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new([rows, cols], data).unwrap()
}

fn koleo_value(x: Tensor) -> f64 {
    let mut g = Graph::new();
    let v = g.param(x);
    let l = koleo_loss(&mut g, v).unwrap();
    g.value(l).item().unwrap()
}

/// Orthogonal matrix from Gram-Schmidt on random columns.
fn random_rotation(d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, &[]);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..4,
        values in prop::collection::vec(-1e3f64..1e3, 12),
        log_tau in -3f64..3.0,
    ) {
        let cols = 12 / rows.max(1);
        let data = values[..rows * cols].to_vec();
        let mut g = Graph::new();
        let x = g.constant(tensor(rows, cols, data));
        let s = g.softmax(x, 10f64.powf(log_tau)).unwrap();
        for r in 0..rows {
            let row = g.value(s).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn fan_out_gradients_add(values in prop::collection::vec(-2f64..2.0, 6), c in -3f64..3.0) {
        let mut g = Graph::new();
        let x = g.param(tensor(2, 3, values.clone()));
        let a = g.scale(x, c).unwrap();
        let b = g.exp(x).unwrap();
        let y = g.add(a, b).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        let got = grads.get(x).unwrap().data().to_vec();
        for (gv, v) in got.iter().zip(&values) {
            prop_assert!((gv - (c + v.exp())).abs() <= 1e-12 * (c.abs() + v.exp()));
        }
    }

    #[test]
    fn dino_loss_is_nonnegative(
        s in prop::collection::vec(-5f64..5.0, 12),
        t in prop::collection::vec(-5f64..5.0, 6),
        ts in 0.01f64..1.0,
        tt in 0.01f64..1.0,
    ) {
        let mut g = Graph::new();
        let a = g.param(tensor(2, 3, s[..6].to_vec()));
        let b = g.param(tensor(2, 3, s[6..].to_vec()));
        let loss = dino_loss(&mut g, &[a, b], &[tensor(2, 3, t)], &[0.0; 3], Temperatures { student: ts, teacher: tt }).unwrap();
        prop_assert!(g.value(loss).item().unwrap() >= 0.0);
    }

    #[test]
    fn ibot_ignores_unmasked_student_logits(
        s in prop::collection::vec(-3f64..3.0, 12),
        t in prop::collection::vec(-3f64..3.0, 12),
        mask in prop::collection::vec(any::<bool>(), 4),
        noise in prop::collection::vec(-10f64..10.0, 12),
    ) {
        let temps = Temperatures { student: 0.1, teacher: 0.05 };
        let plan = MaskPlan { rows: 2, cols: 2, mask: mask.clone() };
        let value = |student: Vec<f64>| {
            let mut g = Graph::new();
            let v = g.param(tensor(4, 3, student));
            let (l, _) = ibot_loss(&mut g, &[v], &[tensor(4, 3, t.clone())], &[plan.clone()], &[0.1, 0.0, -0.1], temps).unwrap();
            g.value(l).item().unwrap()
        };
        let perturbed: Vec<f64> = s.iter().enumerate().map(|(i, v)| if mask[i / 3] { *v } else { v + noise[i] }).collect();
        prop_assert_eq!(value(s.clone()).to_bits(), value(perturbed).to_bits());
    }

    #[test]
    fn koleo_ignores_rotation_and_row_scale(
        data in prop::collection::vec(-1f64..1.0, 15),
        scales in prop::collection::vec(0.1f64..10.0, 5),
        seed in any::<u64>(),
    ) {
        prop_assume!(data.chunks(3).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-4));
        let base = koleo_value(tensor(5, 3, data.clone()));
        let q = random_rotation(3, seed);
        let rotated: Vec<f64> = data.chunks(3).flat_map(|r| q.iter().map(move |col| r.iter().zip(col).map(|(a, b)| a * b).sum::<f64>())).collect();
        let scaled: Vec<f64> = data.chunks(3).zip(&scales).flat_map(|(r, s)| r.iter().map(move |v| v * s)).collect();
        prop_assert!((koleo_value(tensor(5, 3, rotated)) - base).abs() < 1e-9);
        prop_assert!((koleo_value(tensor(5, 3, scaled)) - base).abs() < 1e-9);
    }

    #[test]
    fn auroc_is_rank_invariant(
        levels in prop::collection::vec(0u32..2000, 4..60),
        labels in prop::collection::vec(any::<bool>(), 60),
    ) {
        let n = levels.len();
        let mut labels = labels[..n].to_vec();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = levels.iter().map(|&k| k as f64 / 1000.0 - 1.0).collect();
        let base = auroc(&scores, &labels).unwrap();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s + 1.0).collect();
        prop_assert_eq!(auroc(&exp, &labels).unwrap(), base);
        prop_assert_eq!(auroc(&affine, &labels).unwrap(), base);
    }

    #[test]
    fn auroc_of_negated_scores_is_complement(
        scores in prop::collection::hash_set(-1_000_000i64..1_000_000, 4..60),
        labels in prop::collection::vec(any::<bool>(), 60),
    ) {
        let scores: Vec<f64> = scores.into_iter().map(|k| k as f64).collect();
        let mut labels = labels[..scores.len()].to_vec();
        labels[0] = true;
        labels[1] = false;
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let total = auroc(&scores, &labels).unwrap() + auroc(&neg, &labels).unwrap();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dice_is_symmetric(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..100)) {
        let (p, g): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        prop_assert_eq!(dice_macro(&p, &g, 3).unwrap(), dice_macro(&g, &p, 3).unwrap());
    }

    #[test]
    fn mann_whitney_branches_agree_at_the_exact_limit(
        a in prop::collection::vec(0f64..1.0, 8),
        b in prop::collection::vec(0f64..1.0, 8),
        shift in 0f64..0.5,
    ) {
        let a: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let exact = mann_whitney(&a, &b).unwrap();
        let normal = mann_whitney_normal(&a, &b).unwrap();
        prop_assert!(exact.exact && !normal.exact);
        prop_assert!((exact.p - normal.p).abs() <= 0.02, "exact {} normal {}", exact.p, normal.p);
    }

    #[test]
    fn group_subsets_have_equal_size(
        groups in prop::collection::vec(0usize..4, 8..80),
        folds in 1usize..6,
        seed in any::<u64>(),
    ) {
        let names: Vec<String> = groups.iter().map(|g| format!("g{}", g)).collect();
        let splits = make_group_splits(&names, folds, None, seed).unwrap();
        prop_assert_eq!(splits.folds.len(), folds);
        for f in &splits.folds {
            prop_assert!(f.subsets.values().all(|s| s.len() == splits.subset_size));
            for (name, rows) in &f.subsets {
                if name != xrss::audit::ALL {
                    prop_assert!(rows.iter().all(|&r| &names[r] == name));
                }
            }
        }
    }

    #[test]
    fn localization_survives_monotone_rescaling(
        values in prop::collection::vec(0u32..10_000, 16),
        bx in 0f64..48.0,
        by in 0f64..48.0,
        a in 0.1f64..10.0,
        b in -5f64..5.0,
    ) {
        let map = tensor(4, 4, values.iter().map(|&v| v as f64 / 1000.0).collect());
        let boxes = vec![BoxAnnotation { image_id: "i".into(), finding: "f".into(), x: bx, y: by, width: 16.0, height: 16.0 }];
        let at = |m: Tensor| {
            let maps = vec![AttentionMap { image_id: "i".into(), finding: "f".into(), map: m }];
            localization_accuracy(&maps, &boxes, 16).unwrap().macro_accuracy
        };
        let base = at(map.clone());
        prop_assert_eq!(at(map.map(|v| a * v + b).unwrap()), base);
        prop_assert_eq!(at(map.map(f64::exp).unwrap()), base);
    }

    #[test]
    fn augmented_views_stay_in_unit_range(seed in any::<u64>(), w in 24usize..72, h in 24usize..72) {
        let mut rng = stream(seed, &[]);
        let img = GrayImage::from_fn(w, h, |_, _| rng.gen::<f64>());
        let cfg = AugmentConfig::desk(2, 16).unwrap();
        let views = make_views(&img, 3, &cfg, &mut rng).unwrap();
        for v in views.globals.iter().chain(&views.locals) {
            prop_assert!(v.image.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn flip_twice_is_identity(seed in any::<u64>(), w in 1usize..20, h in 1usize..20) {
        let mut rng = stream(seed, &[]);
        let img = GrayImage::from_fn(w, h, |_, _| rng.gen::<f64>());
        prop_assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn average_pooling_ignores_patch_order(seed in any::<u64>()) {
        let mut rng = stream(seed, &[]);
        let spec = AdapterSpec { task: TaskKind::Multiclass, pooling: Pooling::Average, depth: 2, lr: 0.1, wd: 0.0 };
        let head = AdapterHead::new(spec, 4, 3).unwrap();
        let params = head.init(&mut rng);
        let tokens: Vec<f64> = (0..2 * 6 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut order: Vec<usize> = (0..6).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let permuted: Vec<f64> = (0..2)
            .flat_map(|b| order.iter().flat_map(move |&p| (0..4).map(move |k| (b, p, k))))
            .map(|(b, p, k)| tokens[(b * 6 + p) * 4 + k])
            .collect();
        let run = |data: Vec<f64>| {
            let mut g = Graph::new();
            let bound = params.bind(&mut g, false);
            let x = g.constant(Tensor::new([2, 6, 4], data).unwrap());
            let out = head.forward(&mut g, &bound, x).unwrap();
            g.value(out.outputs).clone()
        };
        let (a, b) = (run(tokens.clone()), run(permuted));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn token_grid_matches_image_extent(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let cfg = ViTConfig::tiny();
        let mut rng = stream(seed, &[]);
        let params = init_backbone(&cfg, &mut rng).unwrap();
        let img = GrayImage::from_fn(cols * cfg.patch_size, rows * cfg.patch_size, |_, _| rng.gen::<f64>());
        let out = encode(&img, &cfg, &params).unwrap();
        prop_assert_eq!(out.grid(), (rows, cols));
        prop_assert_eq!(1 + out.patches.numel() / out.dim(), 1 + rows * cols);
        prop_assert_eq!(encode(&img, &cfg, &params).unwrap(), out);
    }
}

#[test]
fn bootstrap_width_shrinks_with_sample_size() {
    let mut widths = Vec::new();
    for n in (20..=200).step_by(20) {
        let mut total = 0.0;
        for trial in 0..200u64 {
            let mut rng = stream(41, &[n as u64, trial]);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ci = bootstrap_mean_ci(&x, 200, 0.95, trial).unwrap();
            total += ci.high - ci.low;
        }
        widths.push(total / 200.0);
    }
    assert!(widths.windows(2).all(|w| w[1] < w[0]), "{:?}", widths);
}
