//! Reverse-mode gradients of every differentiable op, and of the per-level
//! training loss, against central finite differences.

mod common;

const TOL: f64 = 1e-4;

#[test]
fn every_op_matches_finite_differences() {
    let errs = common::op_gradient_errors();
    assert!(errs.len() >= 20);
    let bad: Vec<_> = errs.iter().filter(|(_, e)| !(*e < TOL)).collect();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn conditional_level_loss_gradient() {
    let e = common::level_loss_gradient_error(1);
    assert!(e < TOL, "{e:e}");
}

#[test]
fn base_level_loss_gradient() {
    let e = common::level_loss_gradient_error(2);
    assert!(e < TOL, "{e:e}");
}
