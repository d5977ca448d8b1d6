mod common;

use common::losses;

#[test]
fn dino_matches_direct_summation() {
    losses::dino_matches_direct_summation();
}

#[test]
fn ibot_matches_direct_summation() {
    losses::ibot_matches_direct_summation();
}

#[test]
fn koleo_matches_brute_force() {
    losses::koleo_matches_brute_force();
}

#[test]
fn uniform_logits_give_log_k() {
    losses::uniform_logits_give_log_k();
}

#[test]
fn uniform_teacher_against_peaked_student_exceeds_log_k() {
    losses::uniform_teacher_against_peaked_student_exceeds_log_k();
}

#[test]
fn empty_mask_gives_zero() {
    losses::empty_mask_gives_zero();
}

#[test]
fn antipodal_pair_gives_minus_log_two() {
    losses::antipodal_pair_gives_minus_log_two();
}
