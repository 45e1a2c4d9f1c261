//! Layer normalization over the channel axis of a `[T, C]` token matrix.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Per-row statistics cached by the forward pass.
pub struct LayerNormCache {
    /// Normalized rows (before gamma/beta).
    pub normed: Tensor,
    /// Per-row 1/sqrt(var + eps).
    pub inv_std: Vec<f64>,
}

/// `y[t, c] = (x[t, c] − μ_t) / sqrt(σ²_t + ε) · γ[c] + β[c]`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    if x.rank() != 2 {
        return Err(Error::shape(format!(
            "layer_norm expects [T, C], got {:?}",
            x.shape()
        )));
    }
    let (t, c) = (x.shape()[0], x.shape()[1]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "layer_norm gamma/beta must be [{c}], got {:?} / {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let mut out = vec![0.0; t * c];
    let mut normed = vec![0.0; t * c];
    let mut inv_std = vec![0.0; t];
    for row in 0..t {
        let xs = &x.data()[row * c..(row + 1) * c];
        let mean = xs.iter().sum::<f64>() / c as f64;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[row] = istd;
        for j in 0..c {
            let n = (xs[j] - mean) * istd;
            normed[row * c + j] = n;
            out[row * c + j] = n * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((
        Tensor::from_vec(&[t, c], out)?,
        LayerNormCache {
            normed: Tensor::from_vec(&[t, c], normed)?,
            inv_std,
        },
    ))
}

/// Gradients of [`layer_norm`]: returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (t, c) = (cache.normed.shape()[0], cache.normed.shape()[1]);
    if grad_out.shape() != [t, c] {
        return Err(Error::shape(format!(
            "layer_norm grad_out must be [{t}, {c}], got {:?}",
            grad_out.shape()
        )));
    }
    let mut dx = vec![0.0; t * c];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let n = cache.normed.data();
    let dy = grad_out.data();
    let cf = c as f64;
    for row in 0..t {
        let base = row * c;
        let mut sum_dn = 0.0;
        let mut sum_dn_n = 0.0;
        for j in 0..c {
            let dnj = dy[base + j] * gamma.data()[j];
            sum_dn += dnj;
            sum_dn_n += dnj * n[base + j];
            dgamma[j] += dy[base + j] * n[base + j];
            dbeta[j] += dy[base + j];
        }
        let istd = cache.inv_std[row];
        for j in 0..c {
            let dnj = dy[base + j] * gamma.data()[j];
            dx[base + j] = istd * (dnj - sum_dn / cf - n[base + j] * sum_dn_n / cf);
        }
    }
    Ok((
        Tensor::from_vec(&[t, c], dx)?,
        Tensor::from_vec(&[c], dgamma)?,
        Tensor::from_vec(&[c], dbeta)?,
    ))
}
