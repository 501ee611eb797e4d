use crate::ops::{Meter, NoMeter};
use crate::tensor::Tensor4;
use crate::Result;

pub fn relu(input: &Tensor4) -> Tensor4 {
    relu_metered(input, &mut NoMeter)
}

/// Elementwise `max(x, 0)`, one tick per element.
pub fn relu_metered<M: Meter>(input: &Tensor4, meter: &mut M) -> Tensor4 {
    input.map(|x| {
        meter.tick(1);
        if x > 0.0 {
            x
        } else {
            0.0
        }
    })
}

/// Passes `grad_out` where `input > 0`; the subgradient at zero is zero.
pub fn relu_grad(input: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4> {
    input.zip_map(grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
