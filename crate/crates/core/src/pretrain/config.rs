use super::schedule::Schedule;
use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::ssl::HeadConfig;
use crate::vit::{Preset, ViTConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Teacher-side constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub student_temp: f64,
    pub teacher_temp_start: f64,
    pub teacher_temp_end: f64,
    /// Fraction of the run over which the teacher temperature ramps linearly.
    pub teacher_temp_warmup_frac: f64,
    pub center_momentum: f64,
    pub ema_start: f64,
    pub ema_end: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            student_temp: 0.1,
            teacher_temp_start: 0.04,
            teacher_temp_end: 0.07,
            teacher_temp_warmup_frac: 0.3,
            center_momentum: 0.9,
            ema_start: 0.992,
            ema_end: 1.0,
        }
    }
}

/// Masked-patch settings: each global view of each image is masked with
/// probability `probability`, at a ratio uniform in `[ratio_min, ratio_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub probability: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            probability: 0.5,
            ratio_min: 0.1,
            ratio_max: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dino: f64,
    pub ibot: f64,
    pub koleo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            dino: 1.0,
            ibot: 1.0,
            koleo: 0.1,
        }
    }
}

/// Everything a pretraining run needs. Serialized as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub vit: ViTConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    pub grad_clip: f64,
    pub prototypes: usize,
    pub weights: LossWeights,
    pub teacher: TeacherConfig,
    pub mask: MaskConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
}

impl RunConfig {
    /// Full-scale protocol on the large backbone.
    pub fn full_scale() -> Self {
        RunConfig {
            vit: ViTConfig::preset(Preset::Large),
            iterations: 125_000,
            batch_size: 2048,
            warmup_iters: 12_500,
            lr_peak: 1e-3,
            lr_end: 1e-6,
            wd_start: 0.04,
            wd_end: 0.4,
            grad_clip: 3.0,
            prototypes: 65_536,
            weights: LossWeights::default(),
            teacher: TeacherConfig::default(),
            mask: MaskConfig::default(),
            augment: AugmentConfig::full_scale(),
            seed: 0,
            checkpoint_every: 12_500,
        }
    }

    /// Desk-scale run: tiny backbone, 64/32-pixel views, 1024 prototypes.
    /// Warmup keeps the 10% proportion of the full protocol.
    pub fn desk() -> Self {
        let vit = ViTConfig::tiny();
        let augment = AugmentConfig::desk(8, vit.patch_size).expect("static desk factor");
        RunConfig {
            vit,
            iterations: 2000,
            batch_size: 16,
            warmup_iters: 200,
            prototypes: 1024,
            augment,
            checkpoint_every: 500,
            ..Self::full_scale()
        }
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig::for_embed(self.vit.embed_dim, self.prototypes)
    }

    pub fn lr_schedule(&self) -> Schedule {
        Schedule::cosine(self.warmup_iters, self.iterations, 0.0, self.lr_peak, self.lr_end)
    }

    pub fn wd_schedule(&self) -> Schedule {
        Schedule::cosine(0, self.iterations, self.wd_start, self.wd_start, self.wd_end)
    }

    pub fn teacher_temp_schedule(&self) -> Schedule {
        let t = &self.teacher;
        let warm = ((self.iterations as f64 * t.teacher_temp_warmup_frac).round() as usize).min(self.iterations);
        Schedule::linear(warm, self.iterations, t.teacher_temp_start, t.teacher_temp_end, t.teacher_temp_end)
    }

    pub fn ema_schedule(&self) -> Schedule {
        let t = &self.teacher;
        Schedule::cosine(0, self.iterations, t.ema_start, t.ema_start, t.ema_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.augment.validate()?;
        self.head().validate()?;
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2 (nearest-neighbor term)"));
        }
        if self.warmup_iters > self.iterations {
            return Err(Error::invalid("warmup_iters exceeds iterations"));
        }
        if self.augment.global_size % self.vit.patch_size != 0 || self.augment.local_size % self.vit.patch_size != 0 {
            return Err(Error::invalid("view sizes must be multiples of the patch size"));
        }
        let t = &self.teacher;
        if !(t.student_temp > 0.0 && t.teacher_temp_start > 0.0 && t.teacher_temp_end > 0.0) {
            return Err(Error::invalid("temperatures must be positive"));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(t.center_momentum) || !unit(t.ema_start) || !unit(t.ema_end) || !unit(t.teacher_temp_warmup_frac) {
            return Err(Error::invalid("momenta and fractions must lie in [0, 1]"));
        }
        let m = &self.mask;
        if !unit(m.probability) || !(0.0 <= m.ratio_min && m.ratio_min <= m.ratio_max && m.ratio_max < 1.0) {
            return Err(Error::invalid("mask settings out of range"));
        }
        if self.grad_clip <= 0.0 || self.lr_peak < 0.0 || self.lr_end < 0.0 {
            return Err(Error::invalid("grad_clip must be positive and learning rates nonnegative"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_constants() {
        let c = RunConfig::full_scale();
        c.validate().unwrap();
        assert_eq!((c.iterations, c.batch_size), (125_000, 2048));
        assert_eq!(c.lr_schedule().value(12_500).unwrap(), 1e-3);
        assert_eq!(c.wd_schedule().value(0).unwrap(), 0.04);
        assert_eq!(c.wd_schedule().value(125_000).unwrap(), 0.4);
        assert_eq!(c.vit.embed_dim, 1024);
    }

    #[test]
    fn desk_keeps_coverage_split_and_round_trips() {
        let c = RunConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.augment.large_coverage.0, 0.15);
        assert_eq!(c.augment.small_coverage.1, 0.15);
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(RunConfig::from_json("{\"iterations\": 3}").is_err());
    }

    #[test]
    fn teacher_temperature_ramp() {
        let c = RunConfig::desk();
        let s = c.teacher_temp_schedule();
        assert_eq!(s.value(0).unwrap(), 0.04);
        assert_eq!(s.value(600).unwrap(), 0.07);
        assert_eq!(s.value(2000).unwrap(), 0.07);
    }
}
