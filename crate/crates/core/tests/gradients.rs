//! Finite-difference checks for every derivative the training path relies on.

mod common;

#[test]
fn input_gradient_random_nets() {
    assert!(common::input_gradient_error() < 1e-5);
}

#[test]
fn param_gradients_plain_backprop() {
    assert!(common::backprop_error() < 1e-6);
}

#[test]
fn param_gradients_through_input_gradient() {
    assert!(common::input_gradient_pathway_error() < 1e-5);
}

#[test]
fn param_gradients_mixed_upstream_vector_output() {
    assert!(common::mixed_upstream_error() < 1e-5);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    assert!(common::loss_gradient_error() < 1e-4);
}

#[test]
fn gradient_transform_matches_finite_differences() {
    for seed in 0..5 {
        assert!(common::gradient_transform_error(seed) < 1e-6);
    }
}
