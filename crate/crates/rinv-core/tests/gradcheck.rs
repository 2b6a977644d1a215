//! Finite-difference validation of every parameterized operation's
//! reverse-mode gradient.

use rinv_core::verify::{run_suite, Suite, GRADCHECK_BOUND};

#[test]
fn every_parameterized_op_matches_central_finite_differences() {
    let report = run_suite(Suite::Gradients, None).unwrap();
    assert_eq!(
        report.checks.len(),
        10,
        "dense, planar conv, lifting, group conv, monomial, local ws, \
         global ws, mlp, self-attention, and gated rows are all covered"
    );
    for check in &report.checks {
        assert!(
            check.residual <= GRADCHECK_BOUND,
            "gradient drifted from finite differences: {}",
            check.line()
        );
    }
}
