//! Shared helpers for unit tests: independent brute-force oracles and
//! random tensor generation. Oracles use plain nested loops and never touch
//! the im2col/gemm path they are checking.

use rand::Rng;

use crate::tensor::Tensor;

pub fn rng_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Direct-summation cross-correlation oracle.
pub fn naive_conv3d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Tensor {
    let (c_out, c_in, k) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    let (h, w, d) = (input.shape()[1], input.shape()[2], input.shape()[3]);
    let out_e = |e: usize| (e + 2 * padding - k) / stride + 1;
    let (oh_n, ow_n, od_n) = (out_e(h), out_e(w), out_e(d));
    let mut out = Tensor::zeros(&[c_out, oh_n, ow_n, od_n]);
    for co in 0..c_out {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                for od in 0..od_n {
                    let mut acc = bias.data()[co];
                    for ci in 0..c_in {
                        for kh in 0..k {
                            for kw in 0..k {
                                for kd in 0..k {
                                    let ih = (oh * stride + kh) as isize - padding as isize;
                                    let iw = (ow * stride + kw) as isize - padding as isize;
                                    let id = (od * stride + kd) as isize - padding as isize;
                                    if ih < 0
                                        || iw < 0
                                        || id < 0
                                        || ih >= h as isize
                                        || iw >= w as isize
                                        || id >= d as isize
                                    {
                                        continue;
                                    }
                                    acc += input.at(&[ci, ih as usize, iw as usize, id as usize])
                                        * kernel.at(&[co, ci, kh, kw, kd]);
                                }
                            }
                        }
                    }
                    out.set(&[co, oh, ow, od], acc);
                }
            }
        }
    }
    out
}

/// Direct scatter oracle for transposed convolution (no padding).
pub fn naive_conv_transpose3d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Tensor {
    let (c_in, c_out, k) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    let (h, w, d) = (input.shape()[1], input.shape()[2], input.shape()[3]);
    let out_e = |e: usize| (e - 1) * stride + k;
    let (oh_n, ow_n, od_n) = (out_e(h), out_e(w), out_e(d));
    let mut out = Tensor::zeros(&[c_out, oh_n, ow_n, od_n]);
    for co in 0..c_out {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                for od in 0..od_n {
                    out.set(&[co, oh, ow, od], bias.data()[co]);
                }
            }
        }
    }
    for ci in 0..c_in {
        for ih in 0..h {
            for iw in 0..w {
                for id in 0..d {
                    let x = input.at(&[ci, ih, iw, id]);
                    for co in 0..c_out {
                        for kh in 0..k {
                            for kw in 0..k {
                                for kd in 0..k {
                                    let idx = [co, ih * stride + kh, iw * stride + kw, id * stride + kd];
                                    let v = out.at(&idx) + x * kernel.at(&[ci, co, kh, kw, kd]);
                                    out.set(&idx, v);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
