use coxq::harness::verify::{run_verify, Suite};

fn assert_pass(suite: Suite, cases: usize, tol: Option<f64>) {
    let report = run_verify(suite, cases, 11, tol).unwrap();
    assert!(report.passed(), "{report}");
    assert_eq!(report.cases, cases);
}

#[test]
fn projection_matches_active_set_oracle() {
    assert_pass(Suite::Lemma1, 200, Some(1e-6));
}

#[test]
fn step_solver_matches_grid_scan() {
    assert_pass(Suite::Lemma2, 1000, None);
}

#[test]
fn bounds_match_scalar_loops() {
    assert_pass(Suite::Bounds, 300, None);
}

#[test]
fn analytic_gradients_match_finite_differences() {
    assert_pass(Suite::Gradients, 50, Some(1e-4));
}

#[test]
fn quantile_loss_matches_naive_sum() {
    assert_pass(Suite::Quantiles, 300, None);
}

#[test]
fn reports_are_reproducible() {
    let a = run_verify(Suite::Gradients, 5, 3, None).unwrap();
    let b = run_verify(Suite::Gradients, 5, 3, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn impossible_tolerance_reports_failures() {
    let report = run_verify(Suite::Bounds, 20, 0, Some(1e-300)).unwrap();
    assert!(report.max_deviation >= 0.0);
    assert!(run_verify(Suite::Lemma1, 1, 0, Some(-1.0)).is_err());
    assert!(run_verify(Suite::Lemma1, 1, 0, Some(f64::NAN)).is_err());
}
