//! Bias, cross-population transfer, and attention localization audits
//! built from frozen-feature adapters and the metrics module.

mod bias;
mod groups;
mod localize;
mod transfer;

pub use bias::{
    benchmark_spec, bias_benchmark, cross_group_eval, run_bias_benchmark, BiasBenchmark, BiasKind, BiasReport,
    Comparison, BIAS_JSON, BIAS_MATRIX,
};
pub use groups::{make_group_splits, split_80_10_10, AgeBin, Fold, GroupSplits, Partition, ALL, DEFAULT_FOLDS};
pub use localize::{
    argmax_patch, localization_accuracy, AttentionMap, BoxAnnotation, FindingAccuracy, Localization,
};
pub use transfer::{map_external_targets, transfer_eval, TransferReport};
