//! End-to-end checks that rotations commute with the equivariant stack:
//! the cyclic-group algebra itself, lifting convolutions, and
//! group convolutions, at both lattice and off-lattice orders.

use rinv_core::verify::{run_suite, Suite};

#[test]
fn cyclic_group_axioms_hold_for_all_standard_orders() {
    let report = run_suite(Suite::Group, None).unwrap();
    assert_eq!(report.checks.len(), 20, "four axioms across five orders");
    for check in &report.checks {
        assert!(
            check.passed(),
            "group axiom violated: {}",
            check.line()
        );
        assert_eq!(check.residual, 0.0, "axioms are counted, not approximated");
    }
}

#[test]
fn quarter_turn_equivariance_is_bit_exact_and_c8_stays_within_bounds() {
    let report = run_suite(Suite::Equivariance, None).unwrap();
    assert!(report.passed(), "\n{}", report.render());
    for check in &report.checks {
        if check.name.contains("commutes") && check.name.contains("C4") {
            assert_eq!(
                check.residual, 0.0,
                "lattice rotations must commute exactly: {}",
                check.line()
            );
        }
    }
    let c8: Vec<_> = report
        .checks
        .iter()
        .filter(|c| c.name.contains("C8"))
        .collect();
    assert_eq!(c8.len(), 2, "lifting and group conv are both probed at C8");
    for check in c8 {
        assert!(check.residual <= 1e-2, "{}", check.line());
    }
}

#[test]
fn equivariance_holds_at_an_explicitly_requested_order() {
    let report = run_suite(Suite::Equivariance, Some(2)).unwrap();
    assert!(report.passed(), "\n{}", report.render());
    for check in &report.checks {
        assert_eq!(check.residual, 0.0, "half turns permute the lattice");
    }
}
