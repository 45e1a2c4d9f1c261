//! On-disk datasets: SSV1 sample pairs plus a manifest file.
//!
//! Each sample's randomness derives only from (dataset seed, sample
//! index), so generation is order-independent and reproducible.

use std::fs;
use std::path::{Path, PathBuf};

use spineseg_core::io::ssv;
use spineseg_core::phantom::{generate_phantom, PhantomSpec};
use spineseg_core::volume::LabeledVolume;
use spineseg_core::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Mix the dataset seed with the sample index (splitmix64 finalizer).
pub fn sample_seed(dataset_seed: u64, index: u64) -> u64 {
    let mut z = dataset_seed
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate `n` phantom pairs under `out_dir` and write the manifest.
/// Returns the (volume, label) file name pairs in index order.
pub fn synthesize(
    out_dir: &Path,
    n: usize,
    spec: &PhantomSpec,
    seed: u64,
) -> Result<Vec<(String, String)>> {
    fs::create_dir_all(out_dir)?;
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let (vol, labels) = generate_phantom(spec, sample_seed(seed, i as u64))?;
        let vol_name = format!("sample_{i:04}.vol.ssv");
        let lab_name = format!("sample_{i:04}.lab.ssv");
        ssv::write_volume(&out_dir.join(&vol_name), &vol)?;
        ssv::write_labels(&out_dir.join(&lab_name), &labels)?;
        pairs.push((vol_name, lab_name));
    }
    let mut manifest = String::new();
    manifest.push_str("# spineseg dataset\n");
    manifest.push_str(&format!(
        "# dims {} {} {}\n",
        spec.dims[0], spec.dims[1], spec.dims[2]
    ));
    manifest.push_str(&format!("# vertebrae {}\n", spec.n_vertebrae));
    manifest.push_str(&format!("# noise {}\n", spec.noise_sigma));
    manifest.push_str(&format!("# seed {seed}\n"));
    manifest.push_str(&format!("# count {n}\n"));
    for (v, l) in &pairs {
        manifest.push_str(&format!("{v} {l}\n"));
    }
    fs::write(out_dir.join(MANIFEST_NAME), manifest)?;
    Ok(pairs)
}

/// All samples of a dataset, loaded into memory in manifest order.
pub struct Dataset {
    pub samples: Vec<LabeledVolume>,
    pub dir: PathBuf,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&manifest_path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", manifest_path.display()),
            ))
        })?;
        let mut samples = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (vol_name, lab_name) = line.split_once(' ').ok_or_else(|| {
                Error::config(format!("manifest line {line:?} is not \"vol lab\""))
            })?;
            let vol = ssv::read_volume(&dir.join(vol_name))?;
            let labels = ssv::read_labels(&dir.join(lab_name.trim()))?;
            samples.push(LabeledVolume::new(vol, labels)?);
        }
        Ok(Dataset {
            samples,
            dir: dir.to_path_buf(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
