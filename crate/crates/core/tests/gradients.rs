//! Autograd quantities used by the regularizers against central finite
//! differences, in double precision.

mod common;

use common::*;
use compgan::discriminator::R1Branch;

const H: f64 = 1e-6;
const TOL: f64 = 1e-3;

#[test]
fn r1_image_branch_matches_finite_differences() {
    let (grad, penalty) = r1_errors(R1Branch::Image, H);
    assert!(grad < TOL && penalty < TOL, "gradient {grad}, penalty {penalty}");
}

#[test]
fn r1_segmentation_branch_matches_finite_differences() {
    let (grad, penalty) = r1_errors(R1Branch::Segmentation, H);
    assert!(grad < TOL && penalty < TOL, "gradient {grad}, penalty {penalty}");
}

/// The background generator has no stop-gradient, so with it alone the
/// product is the full Jacobian over every slot.
#[test]
fn path_jacobian_product_matches_finite_differences() {
    let (jt_y, fd) = path_products(&[0], H);
    let err = relative_error(&jt_y, &fd);
    assert!(err < TOL, "J^T y relative error {err}");
}

/// With every class active the texture slots enter after the stop-gradient
/// and keep their exact derivative.
#[test]
fn texture_slot_derivatives_survive_the_stop_gradient() {
    let (jt_y, fd) = path_products(&[0, 1, 2, 3, 4, 5], H);
    let texture = foreground_texture_slots(6);
    let err = relative_error(&jt_y.index_select(1, &texture), &fd.index_select(1, &texture));
    assert!(err < TOL, "texture-slot J^T y relative error {err}");
}
