mod common;

use dualfusion::diffusion::linear_schedule;

#[test]
fn every_op_matches_central_differences() {
    for (name, err) in common::op_gradient_suite() {
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn full_denoiser_loss_matches_central_differences() {
    let sched = linear_schedule(50, 1e-4, 0.02).unwrap();
    let (scalars, err) = common::denoiser_loss_gradient(&sched);
    assert!(scalars <= 5_000, "{scalars} parameters");
    assert!(err < 1e-4, "relative error {err:e}");
}
