//! Acceptance suite: one test per verification criterion, each printing a
//! PASS/FAIL line (visible with `--nocapture`). The trained model fixture is
//! shared process-wide, so the first criterion to need it pays the training
//! cost once.

use ntta::selftest::{self, CriterionReport};

mod properties;

fn check(report: CriterionReport) {
    println!(
        "[{}] {} ({:.1}s) {}",
        report.id,
        if report.passed { "PASS" } else { "FAIL" },
        report.seconds,
        report.detail
    );
    assert!(report.passed, "[{}] {}", report.id, report.detail);
}

#[test]
fn a1_closed_form_kl_equivalence() {
    check(selftest::a1_kl_closed_form());
}

#[test]
fn a2_joint_kl_decomposition() {
    check(selftest::a2_joint_kl_decomposition());
}

#[test]
fn a3_gradient_correctness() {
    check(selftest::a3_gradient_correctness());
}

#[test]
fn a4_zeroth_order_estimator() {
    check(selftest::a4_zeroth_order_estimator());
}

#[test]
fn a5_schedule_identities() {
    check(selftest::a5_schedule_identities());
}

#[test]
fn a6_reduction_identity() {
    check(selftest::a6_reduction_identity());
}

#[test]
fn a7_end_to_end_alignment() {
    check(selftest::a7_end_to_end_alignment());
}

#[test]
fn a8_particle_ablation() {
    check(selftest::a8_particle_ablation());
}

#[test]
fn a9_tweedie_exactness() {
    check(selftest::a9_tweedie_exactness());
}

#[test]
fn a10_multi_objective_sweep() {
    check(selftest::a10_multi_objective_sweep());
}

#[test]
fn a11_plumbing() {
    check(selftest::a11_plumbing());
}
