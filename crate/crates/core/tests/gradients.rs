//! Analytic gradients of each network component against central
//! differences.

use pvseg_core::gradcheck::{check_backbone, check_decoder_step, check_encoder, check_pixel_embed, check_total_loss};

const COMPONENT_TOL: f64 = 1e-4;
const LOSS_TOL: f64 = 1e-3;

#[test]
fn backbone_output_wrt_input() {
    let r = check_backbone().unwrap();
    assert_eq!(r.checked, 3 * 32 * 32);
    assert!(r.max_relative_error <= COMPONENT_TOL, "{r:?}");
}

#[test]
fn encoder_tokens_and_parameters() {
    let r = check_encoder().unwrap();
    assert!(r.max_relative_error <= COMPONENT_TOL, "{r:?}");
}

#[test]
fn pixel_embedding() {
    let r = check_pixel_embed().unwrap();
    assert!(r.max_relative_error <= COMPONENT_TOL, "{r:?}");
}

#[test]
fn masked_decoder_step() {
    let r = check_decoder_step().unwrap();
    assert!(r.max_relative_error <= COMPONENT_TOL, "{r:?}");
}

#[test]
fn total_loss_on_parameter_sample() {
    let r = check_total_loss(0.01, 7).unwrap();
    assert!(r.checked >= 1);
    assert!(r.max_relative_error <= LOSS_TOL, "{r:?}");
}
