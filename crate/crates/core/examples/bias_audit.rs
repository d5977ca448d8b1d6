//! Runs the cross-group audit on the planted and null synthetic
//! benchmarks and prints the train x test AUROC matrices.
//!
//! cargo run --release --example bias_audit [folds]

use xrss::audit::{run_bias_benchmark, BiasKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let folds: usize = std::env::args().nth(1).map_or(Ok(20), |s| s.parse())?;
    for kind in [BiasKind::Planted, BiasKind::Null] {
        let r = run_bias_benchmark(kind, folds, 5)?;
        println!("== {:?}: {} folds, subsets of {}", kind, r.folds, r.subset_size);
        print!("{}", r.matrix_csv()?);
        for c in &r.comparisons {
            println!("trained on {} vs {} when testing on {}: U = {}, p = {:.3e}", c.test, c.train, c.test, c.u, c.p);
        }
        if let Some(p) = &r.pooled {
            println!("pooled same-group vs cross-group: p = {:.3e}", p.p);
        }
    }
    Ok(())
}
