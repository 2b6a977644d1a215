//! Invariance of every pooling head under rotation probes, plus the
//! algebraic identity between weight-sharing and group convolution.

use rinv_core::verify::{run_suite, Suite, EXACT_INVARIANCE_BOUND, INTERP_INVARIANCE_BOUND};

#[test]
fn all_five_heads_are_invariant_under_every_quarter_turn_probe() {
    let report = run_suite(Suite::Invariance, None).unwrap();
    assert_eq!(report.checks.len(), 5, "five head families are probed");
    for check in &report.checks {
        assert!(
            check.residual <= EXACT_INVARIANCE_BOUND,
            "{}",
            check.line()
        );
    }
}

#[test]
fn heads_stay_invariant_within_interpolation_bounds_off_lattice() {
    for order in [8usize, 16] {
        let report = run_suite(Suite::Invariance, Some(order)).unwrap();
        for check in &report.checks {
            assert!(
                check.residual <= INTERP_INVARIANCE_BOUND,
                "{}",
                check.line()
            );
        }
    }
}

#[test]
fn local_weighted_sum_equals_lift_then_group_average() {
    let report = run_suite(Suite::WsIdentity, None).unwrap();
    assert_eq!(report.checks.len(), 3, "identity is probed at three orders");
    for check in &report.checks {
        assert!(check.residual <= 1e-6, "{}", check.line());
    }
}
