//! Multi-crop view generation.
//!
//! A source image yields two large ("global") views and `K` small ("local")
//! views. Large crops cover at least [`COVERAGE_SPLIT`] of the source area,
//! small crops at most that much. Each crop is resized bilinearly and then
//! passed through flip, brightness/contrast jitter and optional blur.

use crate::error::{Error, Result};
use crate::image::GrayImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Area fraction separating large from small crops.
pub const COVERAGE_SPLIT: f64 = 0.15;

/// Smallest source extent accepted by the crop sampler.
pub const MIN_SOURCE_EXTENT: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropKind {
    Large,
    Small,
}

/// A crop rectangle in source pixels plus its output extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub kind: CropKind,
    pub source: (usize, usize),
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub output: usize,
    pub coverage: f64,
    /// True when rejection sampling gave up and the centered fallback was used.
    pub fallback: bool,
}

/// Photometric and geometric choices applied to one view.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugRecord {
    pub flipped: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub blur_sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: GrayImage,
    pub crop: CropSpec,
    pub record: AugRecord,
}

/// Two global views and any number of local views of one source.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub globals: Vec<View>,
    pub locals: Vec<View>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.globals.len() + self.locals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Crop sizes, coverage bands and distortion strengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub global_size: usize,
    pub local_size: usize,
    pub n_local: usize,
    /// Coverage band `[lo, hi]` for large crops.
    pub large_coverage: (f64, f64),
    /// Coverage band `[lo, hi]` for small crops.
    pub small_coverage: (f64, f64),
    pub aspect: (f64, f64),
    pub max_tries: usize,
    pub flip_p: f64,
    /// Probability of applying brightness/contrast jitter.
    pub jitter_p: f64,
    /// Relative jitter magnitude: factors are drawn from `[1 − s, 1 + s]`.
    pub brightness: f64,
    pub contrast: f64,
    /// Blur probability for global view 0, global view 1, and locals.
    pub blur_p: [f64; 3],
    /// Blur σ range in output pixels at 224-pixel resolution; scaled with the view.
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl AugmentConfig {
    /// Full-resolution setting: 512-pixel global and 224-pixel local views.
    pub fn full_scale() -> Self {
        AugmentConfig {
            global_size: 512,
            local_size: 224,
            n_local: 8,
            large_coverage: (COVERAGE_SPLIT, 1.0),
            small_coverage: (0.05, COVERAGE_SPLIT),
            aspect: (3.0 / 4.0, 4.0 / 3.0),
            max_tries: 100,
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.2,
            contrast: 0.2,
            blur_p: [0.5, 0.0, 0.5],
            blur_sigma: (0.1, 2.0),
        }
    }

    /// Resolutions divided by `factor` and rounded to a multiple of `patch`
    /// (at least one patch). Coverage bands are unchanged.
    pub fn desk(factor: usize, patch: usize) -> Result<Self> {
        if factor == 0 || patch == 0 {
            return Err(Error::invalid("desk factor and patch size must be positive"));
        }
        let round = |s: usize| {
            let v = (s as f64 / factor as f64 / patch as f64).round().max(1.0) as usize;
            v * patch
        };
        let base = Self::full_scale();
        Ok(AugmentConfig {
            global_size: round(base.global_size),
            local_size: round(base.local_size),
            ..base
        })
    }

    pub fn validate(&self) -> Result<()> {
        let band_ok = |(lo, hi): (f64, f64)| 0.0 < lo && lo <= hi && hi <= 1.0;
        if !band_ok(self.large_coverage) || !band_ok(self.small_coverage) {
            return Err(Error::invalid("coverage bands must satisfy 0 < lo <= hi <= 1"));
        }
        if self.large_coverage.0 < COVERAGE_SPLIT || self.small_coverage.1 > COVERAGE_SPLIT {
            return Err(Error::invalid("coverage bands must respect the 0.15 split"));
        }
        if !(0.0 < self.aspect.0 && self.aspect.0 <= self.aspect.1) {
            return Err(Error::invalid("aspect band must be positive and ordered"));
        }
        if self.global_size == 0 || self.local_size == 0 {
            return Err(Error::invalid("view sizes must be positive"));
        }
        let probs = [self.flip_p, self.jitter_p, self.blur_p[0], self.blur_p[1], self.blur_p[2]];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("probabilities must lie in [0, 1]"));
        }
        if self.brightness < 0.0 || self.contrast < 0.0 || self.brightness >= 1.0 || self.contrast >= 1.0 {
            return Err(Error::invalid("jitter magnitudes must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Disables every random distortion; crops are still sampled.
    pub fn without_distortions(mut self) -> Self {
        self.flip_p = 0.0;
        self.jitter_p = 0.0;
        self.blur_p = [0.0; 3];
        self
    }

    fn band(&self, kind: CropKind) -> (f64, f64) {
        match kind {
            CropKind::Large => self.large_coverage,
            CropKind::Small => self.small_coverage,
        }
    }

    fn output(&self, kind: CropKind) -> usize {
        match kind {
            CropKind::Large => self.global_size,
            CropKind::Small => self.local_size,
        }
    }
}

/// Samples a crop rectangle whose realized coverage lies in the kind's band.
///
/// Scale is uniform in the band and aspect ratio log-uniform in the aspect
/// band. After `max_tries` rejections the crop is centered with each side
/// scaled by `sqrt(boundary)`, rounded up for large crops and down for small.
pub fn sample_crop<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    kind: CropKind,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<CropSpec> {
    if width < MIN_SOURCE_EXTENT || height < MIN_SOURCE_EXTENT {
        return Err(Error::invalid(format!(
            "source {}x{} is below the {}-pixel minimum",
            width, height, MIN_SOURCE_EXTENT
        )));
    }
    let (lo, hi) = cfg.band(kind);
    let area = (width * height) as f64;
    let (la, lb) = (cfg.aspect.0.ln(), cfg.aspect.1.ln());
    let spec = |x, y, w, h, fallback| CropSpec {
        kind,
        source: (width, height),
        x,
        y,
        w,
        h,
        output: cfg.output(kind),
        coverage: (w * h) as f64 / area,
        fallback,
    };
    for _ in 0..cfg.max_tries {
        let scale = rng.gen_range(lo..=hi);
        let aspect = if la < lb { rng.gen_range(la..lb).exp() } else { cfg.aspect.0 };
        let target = scale * area;
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w == 0 || h == 0 || w > width || h > height {
            continue;
        }
        let cov = (w * h) as f64 / area;
        if cov < lo || cov > hi {
            continue;
        }
        let x = rng.gen_range(0..=width - w);
        let y = rng.gen_range(0..=height - h);
        return Ok(spec(x, y, w, h, false));
    }
    let f = match kind {
        CropKind::Large => lo.sqrt(),
        CropKind::Small => hi.sqrt(),
    };
    let side = |n: usize| {
        let v = f * n as f64;
        let s = match kind {
            CropKind::Large => v.ceil(),
            CropKind::Small => v.floor(),
        };
        (s as usize).clamp(1, n)
    };
    let (w, h) = (side(width), side(height));
    Ok(spec((width - w) / 2, (height - h) / 2, w, h, true))
}

/// Which view an augmentation is for; global views differ in blur probability.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewSlot {
    Global(usize),
    Local,
}

/// Resizes `crop` to `output` pixels square and applies the random
/// distortions, clamping the result to `[0, 1]`.
///
/// Order: flip, brightness (multiplicative), contrast (about the view mean),
/// blur.
pub fn augment_view<R: Rng + ?Sized>(
    crop: &GrayImage,
    output: usize,
    slot: ViewSlot,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(GrayImage, AugRecord)> {
    let mut img = crop.resize_bilinear(output, output)?;
    let mut rec = AugRecord {
        flipped: false,
        brightness: 1.0,
        contrast: 1.0,
        blur_sigma: None,
    };
    if rng.gen::<f64>() < cfg.flip_p {
        img = img.flip_horizontal();
        rec.flipped = true;
    }
    if rng.gen::<f64>() < cfg.jitter_p {
        rec.brightness = 1.0 + rng.gen_range(-1.0..=1.0) * cfg.brightness;
        rec.contrast = 1.0 + rng.gen_range(-1.0..=1.0) * cfg.contrast;
        img = adjust(&img, rec.brightness, rec.contrast);
    }
    let blur_p = match slot {
        ViewSlot::Global(0) => cfg.blur_p[0],
        ViewSlot::Global(_) => cfg.blur_p[1],
        ViewSlot::Local => cfg.blur_p[2],
    };
    if rng.gen::<f64>() < blur_p {
        let s = rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1) * output as f64 / 224.0;
        img = img.gaussian_blur(s);
        rec.blur_sigma = Some(s);
    }
    img.clamp_unit();
    Ok((img, rec))
}

/// Brightness scales every pixel; contrast scales deviations from the mean.
pub fn adjust(img: &GrayImage, brightness: f64, contrast: f64) -> GrayImage {
    let mut out = img.clone();
    out.pixels_mut().iter_mut().for_each(|p| *p *= brightness);
    if contrast != 1.0 {
        let mean = out.mean();
        out.pixels_mut().iter_mut().for_each(|p| *p = mean + contrast * (*p - mean));
    }
    out.clamp_unit();
    out
}

fn make_view<R: Rng + ?Sized>(
    image: &GrayImage,
    kind: CropKind,
    slot: ViewSlot,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<View> {
    let crop = sample_crop(image.width(), image.height(), kind, cfg, rng)?;
    let pixels = image.crop(crop.x, crop.y, crop.w, crop.h)?;
    let (image, record) = augment_view(&pixels, crop.output, slot, cfg, rng)?;
    Ok(View { image, crop, record })
}

/// Two global views plus `n_local` local views of `image`.
pub fn make_views<R: Rng + ?Sized>(
    image: &GrayImage,
    n_local: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<ViewSet> {
    let globals = (0..2)
        .map(|i| make_view(image, CropKind::Large, ViewSlot::Global(i), cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    let locals = (0..n_local)
        .map(|_| make_view(image, CropKind::Small, ViewSlot::Local, cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewSet { globals, locals })
}
