//! Analytic Jacobians against central finite differences.

mod common;

use common::oracles::{fd_cases, FD_REL_TOL};

#[test]
fn jacobian_matches_finite_differences() {
    for (seed, worst) in fd_cases(100) {
        assert!(worst <= FD_REL_TOL, "seed {seed}: relative error {worst:e}");
    }
}
