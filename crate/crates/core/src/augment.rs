//! Augmentation pipeline: optional box-mean denoise, gamma contrast remap,
//! exact 90° rotations, and random crop with pad-back.
//!
//! Intensity transforms (denoise, gamma) never touch labels; geometric
//! transforms (rotation, crop) apply identically to both, labels by
//! nearest-neighbor (here: exact index permutation / copy).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{LabelVolume, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    /// Rotations are quantized to quarter turns; this bounds the angle.
    pub rotate_max_deg: f64,
    /// Per-axis crop fraction in (0, 1]; 1.0 disables cropping.
    pub crop_fraction: f64,
    /// Gamma exponent range (lo, hi), both positive.
    pub contrast_gamma_range: (f64, f64),
    pub denoise: bool,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn identity(seed: u64) -> AugmentSpec {
        AugmentSpec {
            rotate_max_deg: 0.0,
            crop_fraction: 1.0,
            contrast_gamma_range: (1.0, 1.0),
            denoise: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotate_max_deg < 0.0 {
            return Err(Error::config(format!(
                "rotate_max_deg must be >= 0, got {}",
                self.rotate_max_deg
            )));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::config(format!(
                "crop_fraction must be in (0, 1], got {}",
                self.crop_fraction
            )));
        }
        let (lo, hi) = self.contrast_gamma_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::config(format!(
                "contrast_gamma_range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

/// 3×3×3 box-mean filter; borders average over in-bounds neighbors.
fn box_mean(data: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let [h, w, d] = dims;
    let mut out = vec![0.0; data.len()];
    for hh in 0..h {
        for ww in 0..w {
            for dd in 0..d {
                let mut sum = 0.0;
                let mut count = 0.0;
                for nh in hh.saturating_sub(1)..(hh + 2).min(h) {
                    for nw in ww.saturating_sub(1)..(ww + 2).min(w) {
                        for nd in dd.saturating_sub(1)..(dd + 2).min(d) {
                            sum += data[(nh * w + nw) * d + nd];
                            count += 1.0;
                        }
                    }
                }
                out[(hh * w + ww) * d + dd] = sum / count;
            }
        }
    }
    out
}

/// One exact quarter turn about `axis`. Returns the rotated buffer and the
/// new dims; the same index permutation serves volumes and labels.
fn rot90<T: Copy + Default>(data: &[T], dims: [usize; 3], axis: usize) -> (Vec<T>, [usize; 3]) {
    let [h, w, d] = dims;
    let new_dims = match axis {
        0 => [h, d, w],
        1 => [d, w, h],
        _ => [w, h, d],
    };
    let [_, nw, nd] = new_dims;
    let mut out = vec![T::default(); data.len()];
    for hh in 0..h {
        for ww in 0..w {
            for dd in 0..d {
                let (oh, ow, od) = match axis {
                    // (w,d) plane: (w,d) -> (d, W-1-w)
                    0 => (hh, dd, w - 1 - ww),
                    // (h,d) plane: (h,d) -> (d, H-1-h)
                    1 => (dd, ww, h - 1 - hh),
                    // (h,w) plane: (h,w) -> (w, H-1-h)
                    _ => (ww, h - 1 - hh, dd),
                };
                out[(oh * nw + ow) * nd + od] = data[(hh * w + ww) * d + dd];
            }
        }
    }
    (out, new_dims)
}

fn crop_extent(extent: usize, fraction: f64) -> Result<usize> {
    let new_e = (extent as f64 * fraction).floor() as usize;
    if new_e < 1 {
        return Err(Error::geometry(format!(
            "crop of extent {extent} at fraction {fraction} is smaller than 1 voxel"
        )));
    }
    Ok(new_e)
}

/// Apply the pipeline in order: denoise, gamma, rotation, crop + pad back.
pub fn augment(
    vol: &Volume,
    labels: &LabelVolume,
    spec: &AugmentSpec,
) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    if vol.dims() != labels.dims() {
        return Err(Error::shape(format!(
            "volume dims {:?} vs label dims {:?}",
            vol.dims(),
            labels.dims()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut dims = vol.dims();
    let mut intensity = vol.data.data().to_vec();
    let mut label_data = labels.labels().to_vec();
    let mut spacing = vol.spacing;

    if spec.denoise {
        intensity = box_mean(&intensity, dims);
    }

    let (lo, hi) = spec.contrast_gamma_range;
    let gamma = if lo == hi { lo } else { rng.gen_range(lo..hi) };
    if gamma != 1.0 {
        for v in &mut intensity {
            *v = v.signum() * v.abs().powf(gamma);
        }
    }

    let quarter_max = (spec.rotate_max_deg / 90.0).floor() as usize;
    if quarter_max >= 1 {
        let axis = rng.gen_range(0..3usize);
        let turns = rng.gen_range(0..=quarter_max.min(3));
        for _ in 0..turns {
            let (vi, nd) = rot90(&intensity, dims, axis);
            let (li, _) = rot90(&label_data, dims, axis);
            intensity = vi;
            label_data = li;
            let perm = match axis {
                0 => [0, 2, 1],
                1 => [2, 1, 0],
                _ => [1, 0, 2],
            };
            spacing = [spacing[perm[0]], spacing[perm[1]], spacing[perm[2]]];
            dims = nd;
        }
    }

    if spec.crop_fraction < 1.0 {
        let [h, w, d] = dims;
        let ch = crop_extent(h, spec.crop_fraction)?;
        let cw = crop_extent(w, spec.crop_fraction)?;
        let cd = crop_extent(d, spec.crop_fraction)?;
        let oh = rng.gen_range(0..=h - ch);
        let ow = rng.gen_range(0..=w - cw);
        let od = rng.gen_range(0..=d - cd);
        // Keep the cropped region at its original offset; everything
        // outside becomes background.
        let mut vi = vec![0.0; h * w * d];
        let mut li = vec![0u8; h * w * d];
        for hh in oh..oh + ch {
            for ww in ow..ow + cw {
                let base = (hh * w + ww) * d;
                vi[base + od..base + od + cd].copy_from_slice(&intensity[base + od..base + od + cd]);
                li[base + od..base + od + cd].copy_from_slice(&label_data[base + od..base + od + cd]);
            }
        }
        intensity = vi;
        label_data = li;
    }

    let mut out_vol = Volume::new(Tensor::from_vec(&dims, intensity)?)?;
    out_vol.spacing = spacing;
    Ok((out_vol, LabelVolume::new(dims, label_data)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec, NUM_PHANTOM_CLASSES};

    fn sample() -> (Volume, LabelVolume) {
        let spec = PhantomSpec {
            dims: [12, 12, 12],
            n_vertebrae: 2,
            noise_sigma: 0.03,
        };
        generate_phantom(&spec, 1).unwrap()
    }

    #[test]
    fn identity_spec_is_identity() {
        let (vol, labels) = sample();
        let (v2, l2) = augment(&vol, &labels, &AugmentSpec::identity(9)).unwrap();
        assert_eq!(v2.data.data(), vol.data.data());
        assert_eq!(l2.labels(), labels.labels());
    }

    #[test]
    fn two_quarter_turns_equal_a_half_turn() {
        let (vol, _) = sample();
        let dims = vol.dims();
        let (once, d1) = rot90(vol.data.data(), dims, 1);
        let (twice, d2) = rot90(&once, d1, 1);
        assert_eq!(d2, dims);
        // A 180° rotation about W maps (h,d) -> (H-1-h, D-1-d).
        let [h, w, d] = dims;
        for hh in 0..h {
            for ww in 0..w {
                for dd in 0..d {
                    let got = twice[(hh * w + ww) * d + dd];
                    let want = vol.data.data()[((h - 1 - hh) * w + ww) * d + (d - 1 - dd)];
                    assert_eq!(got, want);
                }
            }
        }
    }

    #[test]
    fn rotation_preserves_label_histogram() {
        let (vol, labels) = sample();
        let spec = AugmentSpec {
            rotate_max_deg: 270.0,
            crop_fraction: 1.0,
            contrast_gamma_range: (1.0, 1.0),
            denoise: false,
            seed: 31,
        };
        let (_, l2) = augment(&vol, &labels, &spec).unwrap();
        assert_eq!(
            labels.histogram(NUM_PHANTOM_CLASSES),
            l2.histogram(NUM_PHANTOM_CLASSES)
        );
    }

    #[test]
    fn gamma_one_is_exact_even_for_negative_values() {
        let mut vol = sample().0;
        vol.data.data_mut()[0] = -0.25;
        let labels = LabelVolume::zeros(vol.dims());
        let spec = AugmentSpec {
            contrast_gamma_range: (1.0, 1.0),
            ..AugmentSpec::identity(2)
        };
        let (v2, _) = augment(&vol, &labels, &spec).unwrap();
        assert_eq!(v2.data.data(), vol.data.data());
    }

    #[test]
    fn gamma_remap_preserves_sign_and_monotonicity() {
        let vol = Volume::new(
            Tensor::from_vec(&[1, 1, 4], vec![-0.5, 0.0, 0.25, 1.0]).unwrap(),
        )
        .unwrap();
        let labels = LabelVolume::zeros([1, 1, 4]);
        let spec = AugmentSpec {
            contrast_gamma_range: (2.0, 2.0),
            ..AugmentSpec::identity(3)
        };
        let (v2, _) = augment(&vol, &labels, &spec).unwrap();
        assert_eq!(v2.data.data(), &[-0.25, 0.0, 0.0625, 1.0]);
    }

    #[test]
    fn denoise_touches_only_intensity() {
        let (vol, labels) = sample();
        let spec = AugmentSpec {
            denoise: true,
            ..AugmentSpec::identity(4)
        };
        let (v2, l2) = augment(&vol, &labels, &spec).unwrap();
        assert_ne!(v2.data.data(), vol.data.data());
        assert_eq!(l2.labels(), labels.labels());
    }

    #[test]
    fn crop_keeps_dims_and_zeroes_outside() {
        let (vol, labels) = sample();
        let spec = AugmentSpec {
            crop_fraction: 0.5,
            ..AugmentSpec::identity(5)
        };
        let (v2, l2) = augment(&vol, &labels, &spec).unwrap();
        assert_eq!(v2.dims(), vol.dims());
        assert_eq!(l2.dims(), labels.dims());
        let zeros = v2.data.data().iter().filter(|&&v| v == 0.0).count();
        // 0.5³ of the voxels survive; the rest are zero-padded.
        assert!(zeros >= (12 * 12 * 12) - (6 * 6 * 6));
    }

    #[test]
    fn degenerate_crop_is_geometry_error() {
        let vol = Volume::new(Tensor::zeros(&[2, 2, 2])).unwrap();
        let labels = LabelVolume::zeros([2, 2, 2]);
        let spec = AugmentSpec {
            crop_fraction: 0.4,
            ..AugmentSpec::identity(6)
        };
        assert!(matches!(
            augment(&vol, &labels, &spec),
            Err(Error::InvalidGeometry(_))
        ));
    }

    #[test]
    fn augmentation_is_deterministic_in_seed() {
        let (vol, labels) = sample();
        let spec = AugmentSpec {
            rotate_max_deg: 180.0,
            crop_fraction: 0.8,
            contrast_gamma_range: (0.7, 1.4),
            denoise: true,
            seed: 77,
        };
        let a = augment(&vol, &labels, &spec).unwrap();
        let b = augment(&vol, &labels, &spec).unwrap();
        assert_eq!(a.0.data.data(), b.0.data.data());
        assert_eq!(a.1.labels(), b.1.labels());
    }
}
