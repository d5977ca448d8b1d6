//! Procedural grayscale datasets for desk-scale experiments.

use crate::image::GrayImage;
use crate::rng::stream;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Ring,
    Cross,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Disk, Shape::Ring, Shape::Cross, Shape::Triangle];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Ring => "ring",
            Shape::Cross => "cross",
            Shape::Triangle => "triangle",
        }
    }
}

/// Geometry and photometry ranges for [`render_shape`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeStyle {
    /// Shape area as a fraction of the image area.
    pub area: (f64, f64),
    pub foreground: (f64, f64),
    pub background: (f64, f64),
    pub noise_std: f64,
}

impl Default for ShapeStyle {
    fn default() -> Self {
        ShapeStyle {
            area: (0.06, 0.12),
            foreground: (0.55, 0.95),
            background: (0.05, 0.35),
            noise_std: 0.03,
        }
    }
}

/// Inside test for a shape centered at the origin with a characteristic
/// size `s` and rotation already undone.
fn inside(shape: Shape, s: f64, x: f64, y: f64) -> bool {
    match shape {
        Shape::Disk => x * x + y * y <= s * s,
        Shape::Ring => {
            let r2 = x * x + y * y;
            r2 <= s * s && r2 >= 0.36 * s * s
        }
        Shape::Cross => {
            // arms of half-width s/2 and half-length 1.5 s
            let (ax, ay) = (x.abs(), y.abs());
            (ax <= 0.5 * s && ay <= 1.5 * s) || (ay <= 0.5 * s && ax <= 1.5 * s)
        }
        Shape::Triangle => {
            // equilateral, circumradius s, one vertex up
            let h = 1.5 * s;
            let yb = y + 0.5 * s; // distance above the base
            yb >= 0.0 && yb <= h && x.abs() <= (h - yb) / 3f64.sqrt()
        }
    }
}

/// Characteristic size giving the requested area.
fn size_for_area(shape: Shape, area: f64) -> f64 {
    let pi = std::f64::consts::PI;
    match shape {
        Shape::Disk => (area / pi).sqrt(),
        Shape::Ring => (area / (0.64 * pi)).sqrt(),
        Shape::Cross => (area / 5.0).sqrt(),
        Shape::Triangle => (area / (0.75 * 3f64.sqrt())).sqrt(),
    }
}

/// Half-extent of the bounding circle for a characteristic size.
fn reach(shape: Shape, s: f64) -> f64 {
    match shape {
        Shape::Disk | Shape::Ring | Shape::Triangle => s,
        Shape::Cross => s * (1.5f64.powi(2) + 0.25).sqrt(),
    }
}

/// Renders one shape at a random position, rotation, area and intensity,
/// with 2×2 supersampling and additive Gaussian noise.
pub fn render_shape<R: Rng + ?Sized>(shape: Shape, size: usize, style: &ShapeStyle, rng: &mut R) -> GrayImage {
    let n = size as f64;
    let area = rng.gen_range(style.area.0..=style.area.1) * n * n;
    let s = size_for_area(shape, area);
    let r = reach(shape, s).min(n / 2.0 - 1.0);
    let cx = rng.gen_range(r..=n - r);
    let cy = rng.gen_range(r..=n - r);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let (sin, cos) = theta.sin_cos();
    let fg = rng.gen_range(style.foreground.0..=style.foreground.1);
    let bg = rng.gen_range(style.background.0..=style.background.1);
    let noise = Normal::new(0.0, style.noise_std.max(0.0)).expect("finite std");
    let mut img = GrayImage::from_fn(size, size, |px, py| {
        let mut cover = 0.0;
        for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
            let dx = px as f64 + ox - cx;
            let dy = py as f64 + oy - cy;
            let (x, y) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            if inside(shape, s, x, y) {
                cover += 0.25;
            }
        }
        bg + cover * (fg - bg)
    });
    if style.noise_std > 0.0 {
        img.pixels_mut().iter_mut().for_each(|p| *p += noise.sample(rng));
    }
    img.clamp_unit();
    img
}

/// Balanced labeled shape images; image `i` has label `i mod 4` and is
/// drawn from its own stream, so prefixes of larger datasets agree.
pub fn shapes_dataset(n: usize, size: usize, seed: u64) -> Vec<(GrayImage, usize)> {
    shapes_dataset_with(n, size, &ShapeStyle::default(), seed)
}

/// [`shapes_dataset`] with an explicit style.
pub fn shapes_dataset_with(n: usize, size: usize, style: &ShapeStyle, seed: u64) -> Vec<(GrayImage, usize)> {
    (0..n)
        .map(|i| {
            let shape = Shape::ALL[i % 4];
            let mut rng = stream(seed, &[0x5aa9e, i as u64]);
            (render_shape(shape, size, style, &mut rng), shape.label())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn areas_roughly_match() {
        let style = ShapeStyle {
            area: (0.1, 0.1),
            foreground: (1.0, 1.0),
            background: (0.0, 0.0),
            noise_std: 0.0,
        };
        for shape in Shape::ALL {
            let img = render_shape(shape, 64, &style, &mut stream(1, &[shape as u64]));
            let frac = img.mean();
            assert!((frac - 0.1).abs() < 0.01, "{:?} {}", shape, frac);
        }
    }

    #[test]
    fn dataset_is_balanced_and_deterministic() {
        let a = shapes_dataset(8, 32, 3);
        let b = shapes_dataset(8, 32, 3);
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|(_, l)| *l == 2).count(), 2);
        assert!(a.iter().all(|(im, _)| im.pixels().iter().all(|p| (0.0..=1.0).contains(p))));
    }
}
