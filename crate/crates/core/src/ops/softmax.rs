//! Numerically stabilized softmax along an arbitrary axis.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn axis_geometry(t: &Tensor, axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= t.rank() {
        return Err(Error::InvalidArgument(format!(
            "softmax axis {axis} out of range for rank {}",
            t.rank()
        )));
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let len = t.shape()[axis];
    let inner: usize = t.shape()[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

/// Softmax over `axis`; each slice along the axis sums to 1.
///
/// Stabilized by max-subtraction, so any finite input is valid.
pub fn softmax(logits: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_geometry(logits, axis)?;
    let x = logits.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for j in 0..len {
                out[base + j * inner] *= inv;
            }
        }
    }
    Tensor::from_vec(logits.shape(), out)
}

/// Backward of softmax: `dx = p ⊙ (dy − Σ_j p_j · dy_j)` per slice.
pub fn softmax_backward(probs: &Tensor, grad_out: &Tensor, axis: usize) -> Result<Tensor> {
    if probs.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "softmax backward shapes {:?} vs {:?}",
            probs.shape(),
            grad_out.shape()
        )));
    }
    let (outer, len, inner) = axis_geometry(probs, axis)?;
    let p = probs.data();
    let dy = grad_out.data();
    let mut dx = vec![0.0; p.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for j in 0..len {
                let idx = base + j * inner;
                dot += p[idx] * dy[idx];
            }
            for j in 0..len {
                let idx = base + j * inner;
                dx[idx] = p[idx] * (dy[idx] - dot);
            }
        }
    }
    Tensor::from_vec(probs.shape(), dx)
}
