//! Intensity and label volumes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scalar intensity volume `[H,W,D]` with voxel spacing in millimetres.
///
/// Spacing is in-memory metadata only; the SSV1 container does not persist
/// it.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Tensor,
    pub spacing: [f64; 3],
}

impl Volume {
    pub fn new(data: Tensor) -> Result<Volume> {
        if data.rank() != 3 {
            return Err(Error::shape(format!(
                "volume must be [H,W,D], got {:?}",
                data.shape()
            )));
        }
        Ok(Volume {
            data,
            spacing: [1.0; 3],
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        [
            self.data.shape()[0],
            self.data.shape()[1],
            self.data.shape()[2],
        ]
    }

    /// View as a single-channel `[1,H,W,D]` network input.
    pub fn as_input_tensor(&self) -> Tensor {
        let [h, w, d] = self.dims();
        Tensor::from_vec(&[1, h, w, d], self.data.data().to_vec()).expect("shape is valid")
    }
}

/// Integer class map `[H,W,D]`, one `u8` class id per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], labels: Vec<u8>) -> Result<LabelVolume> {
        let n: usize = dims.iter().product();
        if n == 0 {
            return Err(Error::geometry(format!("label volume dims {dims:?}")));
        }
        if labels.len() != n {
            return Err(Error::shape(format!(
                "dims {dims:?} want {n} labels, got {}",
                labels.len()
            )));
        }
        Ok(LabelVolume { dims, labels })
    }

    pub fn zeros(dims: [usize; 3]) -> LabelVolume {
        LabelVolume {
            dims,
            labels: vec![0; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn at(&self, h: usize, w: usize, d: usize) -> u8 {
        self.labels[(h * self.dims[1] + w) * self.dims[2] + d]
    }

    pub fn set(&mut self, h: usize, w: usize, d: usize, value: u8) {
        self.labels[(h * self.dims[1] + w) * self.dims[2] + d] = value;
    }

    /// Error if any label is outside `[0, num_classes)`.
    pub fn validate_classes(&self, num_classes: usize) -> Result<()> {
        for (i, &l) in self.labels.iter().enumerate() {
            if (l as usize) >= num_classes {
                return Err(Error::InvalidLabel(format!(
                    "label {l} at voxel {i} is outside [0, {num_classes})"
                )));
            }
        }
        Ok(())
    }

    /// Counts per class id over the whole volume.
    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0usize; num_classes];
        for &l in &self.labels {
            if (l as usize) < num_classes {
                counts[l as usize] += 1;
            }
        }
        counts
    }
}

/// A paired intensity volume and its voxel-wise class map.
#[derive(Clone, Debug)]
pub struct LabeledVolume {
    pub volume: Volume,
    pub labels: LabelVolume,
}

impl LabeledVolume {
    pub fn new(volume: Volume, labels: LabelVolume) -> Result<LabeledVolume> {
        if volume.dims() != labels.dims() {
            return Err(Error::shape(format!(
                "volume dims {:?} do not match label dims {:?}",
                volume.dims(),
                labels.dims()
            )));
        }
        Ok(LabeledVolume { volume, labels })
    }
}
