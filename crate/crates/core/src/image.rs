//! Single-channel images with pixel values in `[0, 1]`.

use crate::error::{Error, Result};

/// Row-major grayscale image.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape(
                "image",
                format!("{}x{} image needs {} pixels, got {}", width, height, width * height, pixels.len()),
            ));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite { op: "image" });
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        GrayImage { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        if self.pixels.is_empty() {
            0.0
        } else {
            self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
        }
    }

    /// Copies the rectangle `[x, x+w) × [y, y+h)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<GrayImage> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::invalid(format!(
                "crop {}x{}+{}+{} outside {}x{} image",
                w, h, x, y, self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h);
        for row in y..y + h {
            pixels.extend_from_slice(&self.pixels[row * self.width + x..row * self.width + x + w]);
        }
        Ok(GrayImage { width: w, height: h, pixels })
    }

    pub fn flip_horizontal(&self) -> GrayImage {
        let mut out = self.clone();
        for row in out.pixels.chunks_mut(self.width.max(1)) {
            row.reverse();
        }
        out
    }

    /// Bilinear resampling with half-pixel centers.
    ///
    /// Output pixel `(i, j)` samples the source at
    /// `s = (i + 0.5) · in / out − 0.5`, clamped to `[0, in − 1]`, and
    /// interpolates as `v0 + f · (v1 − v0)` along each axis (x first, then
    /// y), so constant images are reproduced exactly.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<GrayImage> {
        if width == 0 || height == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::invalid("resize to or from an empty image"));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let xs = sample_positions(self.width, width);
        let ys = sample_positions(self.height, height);
        let mut pixels = Vec::with_capacity(width * height);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = lerp(self.get(x0, y0), self.get(x1, y0), fx);
                let bottom = lerp(self.get(x0, y1), self.get(x1, y1), fx);
                pixels.push(lerp(top, bottom, fy));
            }
        }
        Ok(GrayImage { width, height, pixels })
    }

    /// Separable Gaussian blur with edge clamping; kernel radius `ceil(3σ)`.
    pub fn gaussian_blur(&self, sigma: f64) -> GrayImage {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);
        let (w, h) = (self.width as isize, self.height as isize);
        let mut tmp = vec![0.0; self.pixels.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = (x + k as isize - radius).clamp(0, w - 1);
                    acc += kv * self.pixels[(y * w + sx) as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        let mut out = vec![0.0; self.pixels.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = (y + k as isize - radius).clamp(0, h - 1);
                    acc += kv * tmp[(sy * w + x) as usize];
                }
                out[(y * w + x) as usize] = acc;
            }
        }
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: out,
        }
    }

    pub fn clamp_unit(&mut self) {
        self.pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

fn sample_positions(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_constant_is_exact() {
        let img = GrayImage::constant(37, 23, 0.3);
        let out = img.resize_bilinear(64, 64).unwrap();
        assert!(out.pixels().iter().all(|&p| p == 0.3));
        let out = img.resize_bilinear(5, 9).unwrap();
        assert!(out.pixels().iter().all(|&p| p == 0.3));
    }

    #[test]
    fn resize_half_pixel_centers() {
        // 2 -> 4 upsampling of [0, 1]: samples at -0.25 (clamped), 0.25, 0.75, 1.25 (clamped).
        let img = GrayImage::new(2, 1, vec![0.0, 1.0]).unwrap();
        let out = img.resize_bilinear(4, 1).unwrap();
        assert_eq!(out.pixels(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = GrayImage::from_fn(5, 3, |x, y| (x * 3 + y) as f64 / 20.0);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().get(0, 1), img.get(4, 1));
    }

    #[test]
    fn blur_preserves_constant_and_mass() {
        let img = GrayImage::constant(8, 8, 0.5);
        let b = img.gaussian_blur(1.3);
        assert!(b.pixels().iter().all(|&p| (p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn crop_bounds() {
        let img = GrayImage::from_fn(4, 4, |x, y| (x + 4 * y) as f64);
        let c = img.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.pixels(), &[9.0, 10.0, 13.0, 14.0]);
        assert!(img.crop(3, 0, 2, 1).is_err());
    }
}
