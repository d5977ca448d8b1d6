//! Renders one synthetic shape, samples the desk multi-crop view set and
//! writes every view as a PNG.
//!
//! cargo run --example multicrop_views [out_dir]

use xrss::augment::{make_views, AugmentConfig};
use xrss::io::save_png;
use xrss::rng::stream;
use xrss::synth::{render_shape, Shape, ShapeStyle};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out: std::path::PathBuf = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("xrss_views"), Into::into);
    std::fs::create_dir_all(&out)?;
    let image = render_shape(Shape::Cross, 64, &ShapeStyle::default(), &mut stream(1, &[0]));
    save_png(&image, &out.join("source.png"), false)?;

    let cfg = AugmentConfig::desk(8, 16)?;
    let views = make_views(&image, cfg.n_local, &cfg, &mut stream(1, &[1]))?;
    for (name, list) in [("global", &views.globals), ("local", &views.locals)] {
        for (i, v) in list.iter().enumerate() {
            let c = &v.crop;
            println!(
                "{name}{i}: crop {}x{} at ({}, {}) coverage {:.3} -> {}px, flip {}, blur {:?}",
                c.w, c.h, c.x, c.y, c.coverage, c.output, v.record.flipped, v.record.blur_sigma
            );
            save_png(&v.image, &out.join(format!("{name}{i}.png")), false)?;
        }
    }
    println!("wrote {} views to {}", views.len(), out.display());
    Ok(())
}
