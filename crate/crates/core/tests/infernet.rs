mod common;

#[test]
fn closed_form_kl_matches_monte_carlo() {
    let (worst, at_prior) = common::kl_agreement(20, 100_000, 4);
    assert!(worst < 0.02, "relative gap {worst}");
    assert_eq!(at_prior, 0.0);
}

#[test]
fn pooled_posterior_ignores_support_order() {
    let gap = common::pooling_permutation_gap(100, 2);
    assert!(gap < 1e-12, "{gap:e}");
}

#[test]
fn class_swap_permutes_omega_and_fixes_task_variables() {
    let (omega, task) = common::class_swap_gaps();
    assert!(omega < 1e-12, "{omega:e}");
    assert!(task < 1e-12, "{task:e}");
}
