//! Pointwise activations (tanh-form GELU, logistic sigmoid).

use crate::error::Result;
use crate::tensor::Tensor;

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// `dx = dy · gelu'(x)` where `x` is the cached forward input.
pub fn gelu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    x.zip_map(grad_out, |xi, dyi| dyi * gelu_grad_scalar(xi))
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// `dx = dy · s · (1 − s)` where `s` is the cached forward output.
pub fn sigmoid_backward(s: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    s.zip_map(grad_out, |si, dyi| dyi * si * (1.0 - si))
}
