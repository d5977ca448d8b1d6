use super::stats::TestResult;
use crate::error::{Error, Result};
use crate::vit::write_atomic;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One named metric with its interval and any significance tests.
///
/// JSON schema: `{"metric": str, "point": f64, "ci_low": f64|null,
/// "ci_high": f64|null, "ci_method": str|null, "resamples": usize|null,
/// "per_class": [{"name": str, "value": f64|null}], "significance":
/// [{"test": str, "statistic": f64, "p": f64}]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub point: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    /// `"bootstrap_percentile"` or `"seeds"` (spread over replicated runs).
    pub ci_method: Option<String>,
    pub resamples: Option<usize>,
    pub per_class: Vec<ClassValue>,
    pub significance: Vec<TestResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassValue {
    pub name: String,
    pub value: Option<f64>,
}

impl MetricReport {
    pub fn point(metric: impl Into<String>, point: f64) -> Self {
        MetricReport {
            metric: metric.into(),
            point,
            ci_low: None,
            ci_high: None,
            ci_method: None,
            resamples: None,
            per_class: Vec::new(),
            significance: Vec::new(),
        }
    }

    pub fn with_ci(mut self, low: f64, high: f64, method: &str, resamples: usize) -> Self {
        self.ci_low = Some(low);
        self.ci_high = Some(high);
        self.ci_method = Some(method.to_string());
        self.resamples = Some(resamples);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let (Some(l), Some(h)) = (self.ci_low, self.ci_high) {
            if l > h {
                return Err(Error::invalid(format!("{}: CI low {} above high {}", self.metric, l, h)));
            }
        }
        Ok(())
    }
}

pub const CSV_HEADER: [&str; 7] = ["metric", "point", "ci_low", "ci_high", "ci_method", "resamples", "p"];

/// Flat CSV: one row per report; `p` holds the first significance p-value.
pub fn reports_to_csv(reports: &[MetricReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in reports {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            r.metric.clone(),
            r.point.to_string(),
            opt(r.ci_low),
            opt(r.ci_high),
            r.ci_method.clone().unwrap_or_default(),
            r.resamples.map(|v| v.to_string()).unwrap_or_default(),
            opt(r.significance.first().map(|s| s.p)),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn reports_to_json(reports: &[MetricReport]) -> Result<String> {
    for r in reports {
        r.validate()?;
    }
    Ok(serde_json::to_string_pretty(reports)?)
}

pub fn reports_from_json(text: &str) -> Result<Vec<MetricReport>> {
    Ok(serde_json::from_str(text)?)
}

/// Writes `metrics.json` and `metrics.csv` into `dir`.
pub fn write_reports(dir: &Path, reports: &[MetricReport]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("metrics.json"), reports_to_json(reports)?.as_bytes())?;
    write_atomic(&dir.join("metrics.csv"), reports_to_csv(reports)?.as_bytes())
}
