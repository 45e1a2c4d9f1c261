//! Synthetic spine phantoms: a column of bright ellipsoidal vertebral
//! bodies stacked along D, dimmer disc slabs between them, and a dark
//! canal tube running the full depth, over a noisy background.
//!
//! Generation is a pure function of (spec, seed).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{LabelVolume, Volume};

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_BODY: u8 = 1;
pub const CLASS_DISC: u8 = 2;
pub const CLASS_CANAL: u8 = 3;
/// Fixed class map: 0 background, 1 vertebral body, 2 disc, 3 canal.
pub const NUM_PHANTOM_CLASSES: usize = 4;

// Class-conditional intensity distributions: per-sample base levels are
// drawn uniformly from these bands, then per-body jitter and voxel noise
// are added on top. The disc and canal bands overlap, so separating them
// takes spatial context, not just a per-voxel threshold.
const BACKGROUND_BAND: (f64, f64) = (0.08, 0.18);
const BODY_BAND: (f64, f64) = (0.72, 0.95);
const DISC_BAND: (f64, f64) = (0.34, 0.56);
const CANAL_BAND: (f64, f64) = (0.30, 0.52);

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub n_vertebrae: usize,
    pub noise_sigma: f64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&e| e == 0) {
            return Err(Error::geometry(format!("phantom dims {:?}", self.dims)));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.n_vertebrae > 0 {
            let [h, w, d] = self.dims;
            let slot = d as f64 / self.n_vertebrae as f64;
            if (0.28 * h as f64) < 1.5 || (0.28 * w as f64) < 1.5 || 0.32 * slot < 1.0 {
                return Err(Error::geometry(format!(
                    "dims {:?} too small to fit {} vertebra(e)",
                    self.dims, self.n_vertebrae
                )));
            }
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, h: usize, w: usize, d: usize) -> bool {
        let dh = (h as f64 - self.center[0]) / self.radii[0];
        let dw = (w as f64 - self.center[1]) / self.radii[1];
        let dd = (d as f64 - self.center[2]) / self.radii[2];
        dh * dh + dw * dw + dd * dd <= 1.0
    }
}

/// Generate one (intensity, label) phantom pair.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    let [h, w, d] = spec.dims;
    let n = spec.n_vertebrae;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Per-sample base intensities, then geometry; noise is drawn last so
    // its consumption never shifts the shapes.
    let base_bg = rng.gen_range(BACKGROUND_BAND.0..BACKGROUND_BAND.1);
    let base_body = rng.gen_range(BODY_BAND.0..BODY_BAND.1);
    let base_disc = rng.gen_range(DISC_BAND.0..DISC_BAND.1);
    let base_canal = rng.gen_range(CANAL_BAND.0..CANAL_BAND.1);

    let col_h = 0.42 * h as f64;
    let col_w = 0.5 * w as f64;
    let rh = 0.28 * h as f64;
    let rw = 0.28 * w as f64;
    let slot = if n > 0 { d as f64 / n as f64 } else { 0.0 };

    let mut bodies = Vec::with_capacity(n);
    let mut brightness = Vec::with_capacity(n);
    for i in 0..n {
        let scale = 1.0 + rng.gen_range(-0.03..0.03);
        bodies.push(Ellipsoid {
            center: [col_h, col_w, slot * (i as f64 + 0.5)],
            radii: [rh * scale, rw * scale, 0.32 * slot * scale],
        });
        brightness.push(base_body + rng.gen_range(-0.04..0.04));
    }
    let mut discs = Vec::new();
    for i in 0..n.saturating_sub(1) {
        discs.push(Ellipsoid {
            center: [col_h, col_w, slot * (i as f64 + 1.0)],
            radii: [rh * 0.8, rw * 0.8, (0.14 * slot).max(0.6)],
        });
    }
    // Canal tube behind the bodies along H, running the full depth.
    let canal_r = (0.07 * h.min(w) as f64).max(1.2);
    let canal_h = col_h + rh + canal_r + 1.0;
    let canal_w = col_w;

    let mut labels = LabelVolume::zeros([h, w, d]);
    let mut intensity = vec![base_bg; h * w * d];
    if n > 0 {
        for hh in 0..h {
            for ww in 0..w {
                let dh = hh as f64 - canal_h;
                let dw = ww as f64 - canal_w;
                let in_canal = dh * dh + dw * dw <= canal_r * canal_r;
                for dd in 0..d {
                    let mut class = CLASS_BACKGROUND;
                    let mut value = base_bg;
                    if in_canal {
                        class = CLASS_CANAL;
                        value = base_canal;
                    }
                    for disc in &discs {
                        if disc.contains(hh, ww, dd) {
                            class = CLASS_DISC;
                            value = base_disc;
                            break;
                        }
                    }
                    for (i, body) in bodies.iter().enumerate() {
                        if body.contains(hh, ww, dd) {
                            class = CLASS_BODY;
                            value = brightness[i];
                            break;
                        }
                    }
                    if class != CLASS_BACKGROUND {
                        labels.set(hh, ww, dd, class);
                        intensity[(hh * w + ww) * d + dd] = value;
                    }
                }
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::config(format!("noise distribution: {e}")))?;
        for v in &mut intensity {
            *v += normal.sample(&mut rng);
        }
    }
    let volume = Volume::new(Tensor::from_vec(&[h, w, d], intensity)?)?;
    Ok((volume, labels))
}
