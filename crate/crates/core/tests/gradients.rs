mod common;

use common::{max_gradient_error, Objective};

#[test]
fn every_objective_matches_finite_differences_through_the_network() {
    for objective in Objective::ALL {
        for seed in 0..12 {
            let err = max_gradient_error(objective, seed);
            assert!(
                err < 1e-4,
                "{objective:?} seed {seed}: relative error {err}"
            );
        }
    }
}
