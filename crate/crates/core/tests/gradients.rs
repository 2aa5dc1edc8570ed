//! Reverse-mode gradients against central finite differences.

mod common;

use common::*;

#[test]
fn every_primitive_matches_finite_differences() {
    for case in primitive_cases() {
        let err = worst_case_error(&case);
        assert!(err < FD_TOLERANCE, "{}: relative error {err:e}", case.name);
    }
}

#[test]
fn vae_loss() {
    for seed in 0..GRAD_INSTANCES {
        let err = vae_gradient_error(seed);
        assert!(err < FD_TOLERANCE, "instance {seed}: {err:e}");
    }
}

#[test]
fn world_model_loss() {
    for seed in 0..GRAD_INSTANCES {
        let err = wm_gradient_error(seed);
        assert!(err < FD_TOLERANCE, "instance {seed}: {err:e}");
    }
}

#[test]
fn ppo_loss() {
    for seed in 0..GRAD_INSTANCES {
        let err = ppo_gradient_error(seed);
        assert!(err < FD_TOLERANCE, "instance {seed}: {err:e}");
    }
}
