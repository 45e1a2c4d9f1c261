//! Align-corners trilinear resampling of `[C,H,W,D]` volumes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-axis interpolation taps: output index → (lo, hi, weight_hi).
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            if dst == 1 || src == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = pos.floor() as usize;
            let lo = lo.min(src - 1);
            let frac = pos - lo as f64;
            if frac == 0.0 {
                (lo, lo, 0.0)
            } else {
                (lo, (lo + 1).min(src - 1), frac)
            }
        })
        .collect()
}

fn check_target(target: [usize; 3]) -> Result<()> {
    if target.iter().any(|&e| e == 0) {
        return Err(Error::geometry(format!(
            "resample target has a zero extent: {target:?}"
        )));
    }
    Ok(())
}

/// Resample to `target` extents with align-corners semantics.
///
/// When `target` equals the source extents the result is the input, exactly.
pub fn trilinear_resample(input: &Tensor, target: [usize; 3]) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::shape(format!(
            "resample input must be [C,H,W,D], got {:?}",
            input.shape()
        )));
    }
    check_target(target)?;
    let c = input.shape()[0];
    let (h, w, d) = (input.shape()[1], input.shape()[2], input.shape()[3]);
    let [th, tw, td] = target;
    let taps_h = axis_taps(h, th);
    let taps_w = axis_taps(w, tw);
    let taps_d = axis_taps(d, td);
    let mut out = vec![0.0; c * th * tw * td];
    let x = input.data();
    for ci in 0..c {
        let src = &x[ci * h * w * d..(ci + 1) * h * w * d];
        let dst = &mut out[ci * th * tw * td..(ci + 1) * th * tw * td];
        for (oh, &(h0, h1, fh)) in taps_h.iter().enumerate() {
            for (ow, &(w0, w1, fw)) in taps_w.iter().enumerate() {
                for (od, &(d0, d1, fd)) in taps_d.iter().enumerate() {
                    let g = |hh: usize, ww: usize, dd: usize| src[(hh * w + ww) * d + dd];
                    let mut acc = 0.0;
                    for (hh, wh) in [(h0, 1.0 - fh), (h1, fh)] {
                        if wh == 0.0 {
                            continue;
                        }
                        for (ww, wwt) in [(w0, 1.0 - fw), (w1, fw)] {
                            if wwt == 0.0 {
                                continue;
                            }
                            for (dd, wd) in [(d0, 1.0 - fd), (d1, fd)] {
                                if wd == 0.0 {
                                    continue;
                                }
                                let wgt = wh * wwt * wd;
                                if wgt == 1.0 {
                                    acc = g(hh, ww, dd);
                                } else {
                                    acc += wgt * g(hh, ww, dd);
                                }
                            }
                        }
                    }
                    dst[(oh * tw + ow) * td + od] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[c, th, tw, td], out)
}

/// Backward of [`trilinear_resample`]: the transpose of the interpolation
/// weights, scattering `grad_out` onto the source grid.
pub fn trilinear_resample_backward(
    input_shape: &[usize],
    grad_out: &Tensor,
) -> Result<Tensor> {
    if input_shape.len() != 4 || grad_out.rank() != 4 {
        return Err(Error::shape("resample backward expects [C,H,W,D] shapes"));
    }
    let c = input_shape[0];
    if grad_out.shape()[0] != c {
        return Err(Error::shape(format!(
            "resample backward channel mismatch: {} vs {}",
            grad_out.shape()[0],
            c
        )));
    }
    let (h, w, d) = (input_shape[1], input_shape[2], input_shape[3]);
    let (th, tw, td) = (
        grad_out.shape()[1],
        grad_out.shape()[2],
        grad_out.shape()[3],
    );
    let taps_h = axis_taps(h, th);
    let taps_w = axis_taps(w, tw);
    let taps_d = axis_taps(d, td);
    let mut dx = vec![0.0; c * h * w * d];
    let dy = grad_out.data();
    for ci in 0..c {
        let src = &dy[ci * th * tw * td..(ci + 1) * th * tw * td];
        let dst = &mut dx[ci * h * w * d..(ci + 1) * h * w * d];
        for (oh, &(h0, h1, fh)) in taps_h.iter().enumerate() {
            for (ow, &(w0, w1, fw)) in taps_w.iter().enumerate() {
                for (od, &(d0, d1, fd)) in taps_d.iter().enumerate() {
                    let g = src[(oh * tw + ow) * td + od];
                    for (hh, wh) in [(h0, 1.0 - fh), (h1, fh)] {
                        if wh == 0.0 {
                            continue;
                        }
                        for (ww, wwt) in [(w0, 1.0 - fw), (w1, fw)] {
                            if wwt == 0.0 {
                                continue;
                            }
                            for (dd, wd) in [(d0, 1.0 - fd), (d1, fd)] {
                                if wd == 0.0 {
                                    continue;
                                }
                                dst[(hh * w + ww) * d + dd] += wh * wwt * wd * g;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(input_shape, dx)
}
