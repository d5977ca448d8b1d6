//! Evaluation metrics, bootstrap intervals and significance tests.
//!
//! Conventions shared by every caller: ties in ranked metrics take the
//! average rank, average precision steps over distinct thresholds without
//! interpolation, a class empty in both prediction and target has Dice 1,
//! two-group comparisons use Welch's t-test, and Mann-Whitney switches from
//! exact enumeration to the normal approximation above 8 values per side.

mod basic;
mod ranking;
mod report;
mod stats;
mod text;

pub use basic::{dice_macro, dice_per_class, macro_accuracy, pearson_r, r_squared, smape, SMAPE_EPS};
pub use ranking::{auprc, auprc_macro, auroc, auroc_macro, average_ranks, MacroScore};
pub use report::{
    reports_from_json, reports_to_csv, reports_to_json, write_reports, ClassValue, MetricReport, CSV_HEADER,
};
pub use stats::{
    bootstrap_ci, bootstrap_mean_ci, mann_whitney, mann_whitney_normal, percentile, t_test, BootstrapCi, MannWhitney, TestResult,
    MW_EXACT_MAX,
};
pub use text::{bleu4, clipped_counts, lcs_len, rouge_l, tokenize, BLEU_EPS, ROUGE_BETA};
