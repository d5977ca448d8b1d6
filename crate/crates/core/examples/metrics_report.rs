//! Scores a toy two-finding classifier and a report pair, attaches
//! bootstrap intervals and significance tests, and writes metrics.json and
//! metrics.csv.
//!
//! cargo run --example metrics_report [out_dir]

use xrss::metrics::{
    auprc_macro, auroc_macro, bleu4, bootstrap_ci, bootstrap_mean_ci, mann_whitney, rouge_l, t_test, tokenize,
    write_reports, ClassValue, MetricReport,
};
use xrss::rng::stream;
use rand::Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out: std::path::PathBuf = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("xrss_metrics"), Into::into);
    let mut rng = stream(11, &[]);
    let n = 200;
    let labels: Vec<Vec<bool>> = (0..n).map(|_| vec![rng.gen_bool(0.3), rng.gen_bool(0.5)]).collect();
    // finding 0 is scored well, finding 1 barely above chance
    let scores: Vec<Vec<f64>> = labels
        .iter()
        .map(|l| vec![f64::from(l[0]) * 1.5 + rng.gen::<f64>(), f64::from(l[1]) * 0.2 + rng.gen::<f64>()])
        .collect();
    let names = ["effusion", "nodule"];

    let mut reports = Vec::new();
    for (metric, f) in [("auroc", auroc_macro as fn(&[Vec<f64>], &[Vec<bool>]) -> _), ("auprc", auprc_macro)] {
        let m = f(&scores, &labels)?;
        let ci = bootstrap_ci(
            n,
            |idx| {
                let s: Vec<_> = idx.iter().map(|&i| scores[i].clone()).collect();
                let l: Vec<_> = idx.iter().map(|&i| labels[i].clone()).collect();
                Ok(f(&s, &l)?.mean)
            },
            500,
            0.95,
            1,
        )?;
        let mut r = MetricReport::point(metric, m.mean).with_ci(ci.low, ci.high, "bootstrap_percentile", 500);
        r.per_class = names.iter().zip(m.per_class).map(|(n, v)| ClassValue { name: n.to_string(), value: v }).collect();
        println!("{metric}: {:.4} [{:.4}, {:.4}]", r.point, ci.low, ci.high);
        reports.push(r);
    }

    // per-seed scores of two models compared with both tests
    let a = [0.81, 0.83, 0.80, 0.84, 0.82];
    let b = [0.78, 0.79, 0.80, 0.77, 0.79];
    let mw = mann_whitney(&a, &b)?;
    let t = t_test(&a, &b)?;
    let ci = bootstrap_mean_ci(&a, 500, 0.95, 2)?;
    let mut r = MetricReport::point("auroc_seeds", a.iter().sum::<f64>() / a.len() as f64).with_ci(ci.low, ci.high, "bootstrap_percentile", 500);
    r.significance.push(t.clone());
    println!("seed comparison: U = {}, p = {:.4} (exact {}); Welch t = {:.3}, p = {:.4}", mw.u, mw.p, mw.exact, t.statistic, t.p);
    reports.push(r);

    let cand = tokenize("No acute cardiopulmonary process. Small left effusion.");
    let reference = tokenize("Small left pleural effusion. No acute cardiopulmonary process.");
    let (bleu, rouge) = (bleu4(&cand, &reference), rouge_l(&cand, &reference));
    println!("report text: BLEU-4 {:.4}, ROUGE-L {:.4}", bleu, rouge);
    reports.push(MetricReport::point("bleu4", bleu));
    reports.push(MetricReport::point("rouge_l", rouge));

    write_reports(&out, &reports)?;
    println!("wrote {} and {}", out.join("metrics.json").display(), out.join("metrics.csv").display());
    Ok(())
}
