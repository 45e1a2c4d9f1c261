//! Affine maps on token matrices: `y = x·W + b`.

use crate::error::{Error, Result};
use crate::ops::gemm;
use crate::tensor::Tensor;

/// Plain matrix product `a(m×k) · b(k×n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(format!(
            "matmul on {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    gemm::matmul(m, k, n, a.data(), b.data(), &mut out);
    Tensor::from_vec(&[m, n], out)
}

/// `y[t, j] = Σ_i x[t, i]·w[i, j] + b[j]` for token matrix `x` of shape `[T, d_in]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() != 2 || weight.rank() != 2 || x.shape()[1] != weight.shape()[0] {
        return Err(Error::shape(format!(
            "linear on x {:?}, w {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    let (t, d_in, d_out) = (x.shape()[0], x.shape()[1], weight.shape()[1]);
    if let Some(b) = bias {
        if b.shape() != [d_out] {
            return Err(Error::shape(format!(
                "linear bias must be [{d_out}], got {:?}",
                b.shape()
            )));
        }
    }
    let mut out = vec![0.0; t * d_out];
    gemm::matmul(t, d_in, d_out, x.data(), weight.data(), &mut out);
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(d_out) {
            for (v, &bj) in row.iter_mut().zip(b.data()) {
                *v += bj;
            }
        }
    }
    Tensor::from_vec(&[t, d_out], out)
}

/// Gradients of [`linear`]: returns `(dx, dw, db)`; `db` is `None` when the
/// forward ran without a bias.
pub fn linear_backward(
    x: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let (t, d_in, d_out) = (x.shape()[0], x.shape()[1], weight.shape()[1]);
    if grad_out.shape() != [t, d_out] {
        return Err(Error::shape(format!(
            "linear grad_out must be [{t}, {d_out}], got {:?}",
            grad_out.shape()
        )));
    }
    // dx = dy · wᵀ
    let mut dx = vec![0.0; t * d_in];
    gemm::matmul_nt(t, d_out, d_in, grad_out.data(), weight.data(), &mut dx);
    // dw = xᵀ · dy
    let mut dw = vec![0.0; d_in * d_out];
    gemm::matmul_tn(d_in, t, d_out, x.data(), grad_out.data(), &mut dw);
    let db = if has_bias {
        let mut b = vec![0.0; d_out];
        for row in grad_out.data().chunks_exact(d_out) {
            for (acc, &v) in b.iter_mut().zip(row) {
                *acc += v;
            }
        }
        Some(Tensor::from_vec(&[d_out], b)?)
    } else {
        None
    };
    Ok((
        Tensor::from_vec(&[t, d_in], dx)?,
        Tensor::from_vec(&[d_in, d_out], dw)?,
        db,
    ))
}
