//! 3D cross-correlation and transposed convolution with exact backwards.
//!
//! Both directions are lowered to a single dense gemm via im2col/col2im.
//! Layouts: input `[C_in, H, W, D]`, conv kernel `[C_out, C_in, k, k, k]`,
//! transposed kernel `[C_in, C_out, k, k, k]`, all row-major.

use crate::error::{Error, Result};
use crate::ops::gemm;
use crate::tensor::Tensor;

/// Output extents of conv3d, or an error if any extent is non-integer or
/// non-positive.
pub fn conv3d_out_dims(
    in_dims: [usize; 3],
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<[usize; 3]> {
    if stride == 0 {
        return Err(Error::geometry("stride must be positive"));
    }
    let mut out = [0usize; 3];
    for (axis, &e) in in_dims.iter().enumerate() {
        let padded = e + 2 * padding;
        if padded < k {
            return Err(Error::geometry(format!(
                "axis {axis}: extent {e} + 2*{padding} padding is smaller than kernel {k}"
            )));
        }
        let span = padded - k;
        if span % stride != 0 {
            return Err(Error::geometry(format!(
                "axis {axis}: ({e} + 2*{padding} - {k}) is not divisible by stride {stride}"
            )));
        }
        out[axis] = span / stride + 1;
    }
    Ok(out)
}

fn conv_geometry(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, [usize; 3], [usize; 3])> {
    if input.rank() != 4 {
        return Err(Error::shape(format!(
            "conv3d input must be [C,H,W,D], got {:?}",
            input.shape()
        )));
    }
    if kernel.rank() != 5 {
        return Err(Error::shape(format!(
            "conv3d kernel must be [C_out,C_in,k,k,k], got {:?}",
            kernel.shape()
        )));
    }
    let (c_out, c_in, k) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if kernel.shape()[3] != k || kernel.shape()[4] != k {
        return Err(Error::shape(format!(
            "conv3d kernel must be cubic, got {:?}",
            kernel.shape()
        )));
    }
    if input.shape()[0] != c_in {
        return Err(Error::shape(format!(
            "conv3d input has {} channels, kernel expects {c_in}",
            input.shape()[0]
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape(format!(
            "conv3d bias must be [{c_out}], got {:?}",
            bias.shape()
        )));
    }
    let in_dims = [input.shape()[1], input.shape()[2], input.shape()[3]];
    let out_dims = conv3d_out_dims(in_dims, k, stride, padding)?;
    Ok((c_out, c_in, k, in_dims, out_dims))
}

/// Lower the padded input to a `[C_in·k³, P]` column matrix.
fn im2col(
    x: &[f64],
    c_in: usize,
    in_dims: [usize; 3],
    k: usize,
    stride: usize,
    padding: usize,
    out_dims: [usize; 3],
) -> Vec<f64> {
    let [h, w, d] = in_dims;
    let [oh_n, ow_n, od_n] = out_dims;
    let cols = oh_n * ow_n * od_n;
    let p = padding as isize;
    let mut col = vec![0.0; c_in * k * k * k * cols];
    let mut row = 0usize;
    for c in 0..c_in {
        let x_c = &x[c * h * w * d..(c + 1) * h * w * d];
        for kh in 0..k {
            for kw in 0..k {
                for kd in 0..k {
                    let dst_row = &mut col[row * cols..(row + 1) * cols];
                    row += 1;
                    for oh in 0..oh_n {
                        let ih = (oh * stride + kh) as isize - p;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for ow in 0..ow_n {
                            let iw = (ow * stride + kw) as isize - p;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let src_base = (ih as usize * w + iw as usize) * d;
                            let dst_base = (oh * ow_n + ow) * od_n;
                            if stride == 1 {
                                // Contiguous run of valid od indices.
                                let id0 = kd as isize - p;
                                let od_lo = (-id0).max(0) as usize;
                                let od_hi = ((d as isize - id0).min(od_n as isize)).max(0) as usize;
                                if od_lo < od_hi {
                                    let src_lo = (id0 + od_lo as isize) as usize;
                                    dst_row[dst_base + od_lo..dst_base + od_hi].copy_from_slice(
                                        &x_c[src_base + src_lo..src_base + src_lo + (od_hi - od_lo)],
                                    );
                                }
                            } else {
                                for od in 0..od_n {
                                    let id = (od * stride + kd) as isize - p;
                                    if id >= 0 && id < d as isize {
                                        dst_row[dst_base + od] = x_c[src_base + id as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a column matrix back onto the input grid (adjoint of im2col).
fn col2im(
    col: &[f64],
    c_in: usize,
    in_dims: [usize; 3],
    k: usize,
    stride: usize,
    padding: usize,
    out_dims: [usize; 3],
    dx: &mut [f64],
) {
    let [h, w, d] = in_dims;
    let [oh_n, ow_n, od_n] = out_dims;
    let cols = oh_n * ow_n * od_n;
    let p = padding as isize;
    let mut row = 0usize;
    for c in 0..c_in {
        let dx_c = &mut dx[c * h * w * d..(c + 1) * h * w * d];
        for kh in 0..k {
            for kw in 0..k {
                for kd in 0..k {
                    let src_row = &col[row * cols..(row + 1) * cols];
                    row += 1;
                    for oh in 0..oh_n {
                        let ih = (oh * stride + kh) as isize - p;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for ow in 0..ow_n {
                            let iw = (ow * stride + kw) as isize - p;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let dst_base = (ih as usize * w + iw as usize) * d;
                            let src_base = (oh * ow_n + ow) * od_n;
                            for od in 0..od_n {
                                let id = (od * stride + kd) as isize - p;
                                if id >= 0 && id < d as isize {
                                    dx_c[dst_base + id as usize] += src_row[src_base + od];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Standard cross-correlation: `[C_in,H,W,D] → [C_out,H',W',D']`.
pub fn conv3d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (c_out, c_in, k, in_dims, out_dims) = conv_geometry(input, kernel, bias, stride, padding)?;
    let cols = out_dims.iter().product::<usize>();
    let rows = c_in * k * k * k;
    let col = im2col(input.data(), c_in, in_dims, k, stride, padding, out_dims);
    let mut out = vec![0.0; c_out * cols];
    gemm::matmul(c_out, rows, cols, kernel.data(), &col, &mut out);
    for co in 0..c_out {
        let b = bias.data()[co];
        if b != 0.0 {
            for v in &mut out[co * cols..(co + 1) * cols] {
                *v += b;
            }
        }
    }
    Tensor::from_vec(
        &[c_out, out_dims[0], out_dims[1], out_dims[2]],
        out,
    )
}

/// Gradients of [`conv3d`] w.r.t. input, kernel and bias.
///
/// Recomputes im2col from the cached forward input rather than holding the
/// column matrix across the pass.
pub fn conv3d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let bias_probe = Tensor::zeros(&[kernel.shape()[0]]);
    let (c_out, c_in, k, in_dims, out_dims) =
        conv_geometry(input, kernel, &bias_probe, stride, padding)?;
    let expected = [c_out, out_dims[0], out_dims[1], out_dims[2]];
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "conv3d grad_out must be {expected:?}, got {:?}",
            grad_out.shape()
        )));
    }
    let cols = out_dims.iter().product::<usize>();
    let rows = c_in * k * k * k;

    let mut grad_bias = Tensor::zeros(&[c_out]);
    for co in 0..c_out {
        grad_bias.data_mut()[co] = grad_out.data()[co * cols..(co + 1) * cols].iter().sum();
    }

    let col = im2col(input.data(), c_in, in_dims, k, stride, padding, out_dims);
    let mut grad_kernel = Tensor::zeros(kernel.shape());
    gemm::matmul_nt(c_out, cols, rows, grad_out.data(), &col, grad_kernel.data_mut());

    let mut dcol = vec![0.0; rows * cols];
    gemm::matmul_tn(rows, c_out, cols, kernel.data(), grad_out.data(), &mut dcol);
    let mut grad_input = Tensor::zeros(input.shape());
    col2im(
        &dcol,
        c_in,
        in_dims,
        k,
        stride,
        padding,
        out_dims,
        grad_input.data_mut(),
    );
    Ok((grad_input, grad_kernel, grad_bias))
}

/// Output extents of a transposed conv: `(E−1)·stride + k` per axis.
pub fn conv_transpose3d_out_dims(in_dims: [usize; 3], k: usize, stride: usize) -> Result<[usize; 3]> {
    if stride == 0 {
        return Err(Error::geometry("stride must be positive"));
    }
    Ok([
        (in_dims[0] - 1) * stride + k,
        (in_dims[1] - 1) * stride + k,
        (in_dims[2] - 1) * stride + k,
    ])
}

fn tconv_geometry(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<(usize, usize, usize, [usize; 3], [usize; 3])> {
    if input.rank() != 4 {
        return Err(Error::shape(format!(
            "conv_transpose3d input must be [C,H,W,D], got {:?}",
            input.shape()
        )));
    }
    if kernel.rank() != 5 {
        return Err(Error::shape(format!(
            "conv_transpose3d kernel must be [C_in,C_out,k,k,k], got {:?}",
            kernel.shape()
        )));
    }
    let (c_in, c_out, k) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if kernel.shape()[3] != k || kernel.shape()[4] != k {
        return Err(Error::shape(format!(
            "conv_transpose3d kernel must be cubic, got {:?}",
            kernel.shape()
        )));
    }
    if input.shape()[0] != c_in {
        return Err(Error::shape(format!(
            "conv_transpose3d input has {} channels, kernel expects {c_in}",
            input.shape()[0]
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape(format!(
            "conv_transpose3d bias must be [{c_out}], got {:?}",
            bias.shape()
        )));
    }
    let in_dims = [input.shape()[1], input.shape()[2], input.shape()[3]];
    let out_dims = conv_transpose3d_out_dims(in_dims, k, stride)?;
    Ok((c_in, c_out, k, in_dims, out_dims))
}

/// Transposed convolution (fractionally-strided upsampling), no padding.
pub fn conv_transpose3d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<Tensor> {
    let (c_in, c_out, k, in_dims, out_dims) = tconv_geometry(input, kernel, bias, stride)?;
    let p_in = in_dims.iter().product::<usize>();
    let rows = c_out * k * k * k;

    // col[(co,kh,kw,kd), (ih,iw,id)] = Σ_ci W[ci,co,kh,kw,kd] · x[ci,ih,iw,id]
    let mut col = vec![0.0; rows * p_in];
    gemm::matmul_tn(rows, c_in, p_in, kernel.data(), input.data(), &mut col);

    let [ih_n, iw_n, id_n] = in_dims;
    let [oh_n, ow_n, od_n] = out_dims;
    let mut out = vec![0.0; c_out * oh_n * ow_n * od_n];
    let mut row = 0usize;
    for co in 0..c_out {
        let out_c = &mut out[co * oh_n * ow_n * od_n..(co + 1) * oh_n * ow_n * od_n];
        for kh in 0..k {
            for kw in 0..k {
                for kd in 0..k {
                    let src_row = &col[row * p_in..(row + 1) * p_in];
                    row += 1;
                    for ih in 0..ih_n {
                        let oh = ih * stride + kh;
                        for iw in 0..iw_n {
                            let ow = iw * stride + kw;
                            let dst_base = (oh * ow_n + ow) * od_n + kd;
                            let src_base = (ih * iw_n + iw) * id_n;
                            for id in 0..id_n {
                                out_c[dst_base + id * stride] += src_row[src_base + id];
                            }
                        }
                    }
                }
            }
        }
        let b = bias.data()[co];
        if b != 0.0 {
            for v in out_c.iter_mut() {
                *v += b;
            }
        }
    }
    Tensor::from_vec(&[c_out, oh_n, ow_n, od_n], out)
}

/// Gradients of [`conv_transpose3d`] w.r.t. input, kernel and bias.
pub fn conv_transpose3d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let bias_probe = Tensor::zeros(&[kernel.shape()[1]]);
    let (c_in, c_out, k, in_dims, out_dims) = tconv_geometry(input, kernel, &bias_probe, stride)?;
    let expected = [c_out, out_dims[0], out_dims[1], out_dims[2]];
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "conv_transpose3d grad_out must be {expected:?}, got {:?}",
            grad_out.shape()
        )));
    }
    let p_in = in_dims.iter().product::<usize>();
    let rows = c_out * k * k * k;
    let [ih_n, iw_n, id_n] = in_dims;
    let [oh_n, ow_n, od_n] = out_dims;
    let out_per_c = oh_n * ow_n * od_n;

    let mut grad_bias = Tensor::zeros(&[c_out]);
    for co in 0..c_out {
        grad_bias.data_mut()[co] = grad_out.data()[co * out_per_c..(co + 1) * out_per_c]
            .iter()
            .sum();
    }

    // Gather dcol[(co,kh,kw,kd),(ih,iw,id)] = dy[co, ih·s+kh, iw·s+kw, id·s+kd].
    let mut dcol = vec![0.0; rows * p_in];
    let mut row = 0usize;
    for co in 0..c_out {
        let dy_c = &grad_out.data()[co * out_per_c..(co + 1) * out_per_c];
        for kh in 0..k {
            for kw in 0..k {
                for kd in 0..k {
                    let dst_row = &mut dcol[row * p_in..(row + 1) * p_in];
                    row += 1;
                    for ih in 0..ih_n {
                        let oh = ih * stride + kh;
                        for iw in 0..iw_n {
                            let ow = iw * stride + kw;
                            let src_base = (oh * ow_n + ow) * od_n + kd;
                            let dst_base = (ih * iw_n + iw) * id_n;
                            for id in 0..id_n {
                                dst_row[dst_base + id] = dy_c[src_base + id * stride];
                            }
                        }
                    }
                }
            }
        }
    }

    let mut grad_input = Tensor::zeros(input.shape());
    gemm::matmul(c_in, rows, p_in, kernel.data(), &dcol, grad_input.data_mut());

    let mut grad_kernel = Tensor::zeros(kernel.shape());
    gemm::matmul_nt(c_in, p_in, rows, input.data(), &dcol, grad_kernel.data_mut());

    Ok((grad_input, grad_kernel, grad_bias))
}
