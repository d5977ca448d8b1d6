mod common;

use common::metrics;

#[test]
fn auroc_equals_pair_counting() {
    metrics::auroc_equals_pair_counting();
}

#[test]
fn auprc_equals_step_summation() {
    metrics::auprc_equals_step_summation();
}

#[test]
fn dice_equals_pixel_counting() {
    metrics::dice_equals_pixel_counting();
}

#[test]
fn mann_whitney_exact_matches_enumeration() {
    metrics::mann_whitney_exact_matches_enumeration();
}

#[test]
fn mann_whitney_normal_branch_matches_permutations() {
    metrics::mann_whitney_normal_branch_matches_permutations();
}

#[test]
fn welch_matches_reference_values() {
    metrics::welch_matches_reference_values();
}

#[test]
fn pearson_matches_reference_value() {
    metrics::pearson_matches_reference_value();
}

#[test]
fn text_scores_match_reference_values() {
    metrics::text_scores_match_reference_values();
}
