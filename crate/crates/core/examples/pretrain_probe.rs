//! Pretrains the tiny encoder on procedurally generated shapes and compares
//! a frozen-CLS linear probe against the same probe on the initialization.
//!
//! cargo run --release --example pretrain_probe [iterations] [images]

use xrss::pretrain::{toy_ssl_run, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::desk();
    if let Some(n) = args.next() {
        cfg.iterations = n.parse()?;
        cfg.warmup_iters = cfg.iterations / 10;
    }
    let images: usize = args.next().map_or(Ok(2000), |s| s.parse())?;
    let r = toy_ssl_run(&cfg, images, 7)?;
    println!("{} iterations on {} images in {:.0}s", r.iterations, r.images * 4 / 5, r.pretrain_seconds);
    println!("probe accuracy: pretrained {:.3}, random init {:.3}", r.trained_accuracy, r.random_accuracy);
    Ok(())
}
