use crate::adapters::{output_scores, LabeledFeatures, TaskKind, TrainedAdapter};
use crate::error::{Error, Result};
use crate::metrics::{auroc_macro, ClassValue, MetricReport};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub internal: MetricReport,
    pub external: MetricReport,
    /// `internal − external`.
    pub gap: f64,
    /// Adapter fingerprint, identical before and after evaluation.
    pub adapter_fingerprint: String,
}

fn macro_report(name: &str, adapter: &TrainedAdapter, set: &LabeledFeatures, classes: &[String]) -> Result<MetricReport> {
    if !matches!(adapter.spec.task, TaskKind::Multilabel | TaskKind::Multiclass) {
        return Err(Error::invalid("transfer evaluation scores classification adapters"));
    }
    let scores = output_scores(adapter.spec.task, &adapter.predict(&set.features)?);
    let c = set.outputs();
    let labels: Vec<Vec<bool>> = set.targets.data().chunks(c).map(|r| r.iter().map(|&v| v == 1.0).collect()).collect();
    let m = auroc_macro(&scores, &labels)?;
    m.warn_undefined(name, classes);
    let mut r = MetricReport::point(name, m.mean);
    r.per_class = classes
        .iter()
        .zip(m.per_class)
        .map(|(n, v)| ClassValue { name: n.clone(), value: v })
        .collect();
    Ok(r)
}

/// Reorders the external targets into the adapter's class order.
///
/// `mapping` sends each external class name to an internal one; every
/// external class must be mapped. Internal classes without an external
/// counterpart get an all-negative column and drop out of the macro mean.
pub fn map_external_targets(
    external: &LabeledFeatures,
    external_classes: &[String],
    internal_classes: &[String],
    mapping: &BTreeMap<String, String>,
) -> Result<LabeledFeatures> {
    if external_classes.len() != external.outputs() {
        return Err(Error::shape("transfer_eval", "external class names do not match the target width"));
    }
    let mut column = vec![None; internal_classes.len()];
    for (j, name) in external_classes.iter().enumerate() {
        let target = mapping.get(name).ok_or_else(|| Error::invalid(format!("unmapped external class {}", name)))?;
        let k = internal_classes
            .iter()
            .position(|c| c == target)
            .ok_or_else(|| Error::invalid(format!("class {} maps to unknown internal class {}", name, target)))?;
        column[k] = Some(j);
    }
    let c_ext = external.outputs();
    let c_int = internal_classes.len();
    let n = external.features.len();
    let data = external.targets.data();
    let t = Tensor::from_fn([n, c_int], |i| column[i % c_int].map_or(0.0, |j| data[(i / c_int) * c_ext + j]))?;
    LabeledFeatures::new(external.features.clone(), t)
}

/// Scores a frozen adapter on its internal test set and on a mapped
/// external set.
pub fn transfer_eval(
    adapter: &TrainedAdapter,
    internal: &LabeledFeatures,
    internal_classes: &[String],
    external: &LabeledFeatures,
    external_classes: &[String],
    mapping: &BTreeMap<String, String>,
) -> Result<TransferReport> {
    let before = adapter.params.fingerprint();
    if internal_classes.len() != adapter.outputs || internal.outputs() != adapter.outputs {
        return Err(Error::shape("transfer_eval", "internal classes do not match the adapter outputs"));
    }
    let mapped = map_external_targets(external, external_classes, internal_classes, mapping)?;
    let internal_r = macro_report("auroc_internal", adapter, internal, internal_classes)?;
    let external_r = macro_report("auroc_external", adapter, &mapped, internal_classes)?;
    let after = adapter.params.fingerprint();
    if before != after {
        return Err(Error::invalid("adapter parameters changed during transfer evaluation"));
    }
    Ok(TransferReport { gap: internal_r.point - external_r.point, internal: internal_r, external: external_r, adapter_fingerprint: after })
}
