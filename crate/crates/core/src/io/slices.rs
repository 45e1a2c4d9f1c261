//! Slice export: grayscale input (P5) plus color-mapped truth and
//! prediction (P6) images for visual inspection of a segmentation.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};

/// Fixed class palette; class 0 is black, further classes cycle a
/// deterministic hue wheel.
pub fn class_palette(num_classes: usize) -> Vec<[u8; 3]> {
    const BASE: [[u8; 3]; 4] = [
        [0, 0, 0],       // background
        [230, 80, 80],   // vertebral body
        [80, 200, 120],  // disc
        [90, 130, 240],  // canal
    ];
    (0..num_classes)
        .map(|c| {
            if c < BASE.len() {
                BASE[c]
            } else {
                // Golden-angle hue cycle for extra classes.
                let hue = (c as f64 * 137.508) % 360.0;
                hsv_to_rgb(hue, 0.75, 0.9)
            }
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (h / 60.0) as usize % 6 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// (rows, cols) extents of a slice perpendicular to `axis`.
fn plane_dims(dims: [usize; 3], axis: usize) -> (usize, usize) {
    match axis {
        0 => (dims[1], dims[2]),
        1 => (dims[0], dims[2]),
        _ => (dims[0], dims[1]),
    }
}

fn voxel(axis: usize, slice: usize, row: usize, col: usize) -> (usize, usize, usize) {
    match axis {
        0 => (slice, row, col),
        1 => (row, slice, col),
        _ => (row, col, slice),
    }
}

fn write_pgm(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes)?;
    Ok(())
}

fn write_ppm(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let mut bytes = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes)?;
    Ok(())
}

fn label_slice_pixels(
    labels: &LabelVolume,
    axis: usize,
    slice: usize,
    palette: &[[u8; 3]],
) -> Vec<u8> {
    let (rows, cols) = plane_dims(labels.dims(), axis);
    let mut out = Vec::with_capacity(rows * cols * 3);
    for r in 0..rows {
        for c in 0..cols {
            let (h, w, d) = voxel(axis, slice, r, c);
            let class = labels.at(h, w, d) as usize;
            let rgb = palette.get(class).copied().unwrap_or([255, 255, 255]);
            out.extend_from_slice(&rgb);
        }
    }
    out
}

/// Emit an input/truth/prediction triptych for each requested slice index.
///
/// Grayscale normalization uses the whole volume's min/max so slices are
/// comparable. Returns the written paths in emission order.
pub fn export_slices(
    vol: &Volume,
    truth: Option<&LabelVolume>,
    pred: Option<&LabelVolume>,
    axis: usize,
    indices: &[usize],
    num_classes: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if axis > 2 {
        return Err(Error::InvalidArgument(format!(
            "axis must be 0, 1 or 2, got {axis}"
        )));
    }
    let dims = vol.dims();
    for lab in [truth, pred].into_iter().flatten() {
        if lab.dims() != dims {
            return Err(Error::shape(format!(
                "label dims {:?} do not match volume dims {dims:?}",
                lab.dims()
            )));
        }
    }
    for &i in indices {
        if i >= dims[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice {i} out of range for axis {axis} with extent {}",
                dims[axis]
            )));
        }
    }
    fs::create_dir_all(out_dir)?;
    let palette = class_palette(num_classes);
    let (rows, cols) = plane_dims(dims, axis);

    let lo = vol.data.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vol.data.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };

    let mut written = Vec::new();
    for &slice in indices {
        let mut gray = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let (h, w, d) = voxel(axis, slice, r, c);
                let v = vol.data.at(&[h, w, d]);
                gray.push((255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8);
            }
        }
        let input_path = out_dir.join(format!("slice_a{axis}_{slice:04}_input.pgm"));
        write_pgm(&input_path, rows, cols, &gray)?;
        written.push(input_path);
        if let Some(t) = truth {
            let p = out_dir.join(format!("slice_a{axis}_{slice:04}_truth.ppm"));
            write_ppm(&p, rows, cols, &label_slice_pixels(t, axis, slice, &palette))?;
            written.push(p);
        }
        if let Some(pr) = pred {
            let p = out_dir.join(format!("slice_a{axis}_{slice:04}_pred.ppm"));
            write_ppm(&p, rows, cols, &label_slice_pixels(pr, axis, slice, &palette))?;
            written.push(p);
        }
    }
    Ok(written)
}
