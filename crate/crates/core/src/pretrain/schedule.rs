use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

/// Linear warmup from `start` to `peak`, then a cosine or linear ramp to `end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub start: f64,
    pub peak: f64,
    pub end: f64,
}

impl Schedule {
    pub fn cosine(warmup_iters: usize, total_iters: usize, start: f64, peak: f64, end: f64) -> Self {
        Schedule {
            kind: ScheduleKind::Cosine,
            warmup_iters,
            total_iters,
            start,
            peak,
            end,
        }
    }

    pub fn linear(warmup_iters: usize, total_iters: usize, start: f64, peak: f64, end: f64) -> Self {
        Schedule {
            kind: ScheduleKind::Linear,
            ..Self::cosine(warmup_iters, total_iters, start, peak, end)
        }
    }

    /// Constant value for `total_iters` iterations.
    pub fn constant(total_iters: usize, value: f64) -> Self {
        Self::cosine(0, total_iters, value, value, value)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters > self.total_iters {
            return Err(Error::invalid("warmup longer than the schedule"));
        }
        if ![self.start, self.peak, self.end].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("schedule values must be finite"));
        }
        Ok(())
    }

    /// Value at `iter`; `value(warmup_iters)` is exactly `peak` and
    /// `value(total_iters)` exactly `end`.
    pub fn value(&self, iter: usize) -> Result<f64> {
        if iter > self.total_iters {
            return Err(Error::invalid(format!(
                "iteration {} beyond schedule length {}",
                iter, self.total_iters
            )));
        }
        if iter < self.warmup_iters {
            return Ok(self.start + (self.peak - self.start) * iter as f64 / self.warmup_iters as f64);
        }
        if iter == self.total_iters && self.total_iters > self.warmup_iters {
            return Ok(self.end);
        }
        if iter == self.warmup_iters {
            return Ok(self.peak);
        }
        let p = (iter - self.warmup_iters) as f64 / (self.total_iters - self.warmup_iters) as f64;
        Ok(match self.kind {
            ScheduleKind::Cosine => self.end + (self.peak - self.end) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()),
            ScheduleKind::Linear => self.peak + (self.end - self.peak) * p,
        })
    }
}
