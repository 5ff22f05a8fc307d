mod suites;

use suites::{gradients, oracle, zero_cases};

#[test]
fn hard_surfaces_match_brute_force() {
    let r = oracle::hard_surface_oracle(11, 150);
    assert_eq!(r.mismatched_instances, 0, "{r:?}");
}

#[test]
fn engine_outputs_are_ordered_and_non_negative() {
    let r = oracle::ordering_guarantees(12, 1000);
    assert_eq!(r.ordering_violations, 0, "{r:?}");
    assert_eq!(r.negative_layer_entries, 0, "{r:?}");
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let reports = gradients::run(13, gradients::MIN_POINTS);
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn losses_vanish_on_their_zero_inputs() {
    let failed: Vec<_> = zero_cases::run()
        .into_iter()
        .filter(|c| !c.passed())
        .collect();
    assert!(failed.is_empty(), "{failed:#?}");
}
