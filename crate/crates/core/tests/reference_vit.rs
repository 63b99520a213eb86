mod common;

use common::reference::{end_to_end_check, forward_error, sparse_plan};

#[test]
fn forward_matches_reference() {
    for seed in [1, 3] {
        let e = forward_error(seed);
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let worst = end_to_end_check(None, 11);
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn masked_loss_gradient_matches_finite_differences() {
    let worst = end_to_end_check(Some(&sparse_plan()), 21);
    assert!(worst < 1e-3, "{worst}");
}
