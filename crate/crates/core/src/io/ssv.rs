//! SSV1 binary volume container.
//!
//! Little-endian layout: magic `"SSV1"`, u8 dtype (0 = f64 intensity,
//! 1 = u8 labels), u8 ndim, ndim × u32 extents, then the raw row-major
//! payload. Parse failures report the byte offset of the first
//! inconsistency.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};
use crate::volume::{LabelVolume, Volume};

pub const SSV_MAGIC: &[u8; 4] = b"SSV1";
pub const DTYPE_REAL: u8 = 0;
pub const DTYPE_LABEL: u8 = 1;

#[derive(Debug)]
pub enum SsvData {
    Real(Tensor),
    Labels(LabelVolume),
}

fn header_bytes(dtype: u8, shape: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * shape.len());
    out.extend_from_slice(SSV_MAGIC);
    out.push(dtype);
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out
}

/// Write an f64 tensor of any rank ≤ 5.
pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut bytes = header_bytes(DTYPE_REAL, tensor.shape());
    bytes.reserve(tensor.numel() * 8);
    for &v in tensor.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    write_tensor(path, &vol.data)
}

pub fn write_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    let dims = labels.dims();
    let mut bytes = header_bytes(DTYPE_LABEL, &dims);
    bytes.extend_from_slice(labels.labels());
    fs::write(path, bytes)?;
    Ok(())
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Parse an SSV1 file into either an intensity tensor or a label volume.
pub fn read_ssv(path: &Path) -> Result<SsvData> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != SSV_MAGIC {
        return Err(format_err(0, "bad magic, expected \"SSV1\""));
    }
    if bytes.len() < 6 {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    let dtype = bytes[4];
    if dtype != DTYPE_REAL && dtype != DTYPE_LABEL {
        return Err(format_err(4, format!("unknown dtype code {dtype}")));
    }
    let ndim = bytes[5] as usize;
    if ndim == 0 || ndim > MAX_RANK {
        return Err(format_err(5, format!("ndim {ndim} outside 1..={MAX_RANK}")));
    }
    let mut offset = 6;
    let mut shape = Vec::with_capacity(ndim);
    for axis in 0..ndim {
        if offset + 4 > bytes.len() {
            return Err(format_err(bytes.len(), "truncated extents"));
        }
        let e = u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()) as usize;
        if e == 0 {
            return Err(format_err(offset, format!("zero extent on axis {axis}")));
        }
        shape.push(e);
        offset += 4;
    }
    let count: usize = shape.iter().product();
    let elem = if dtype == DTYPE_REAL { 8 } else { 1 };
    let want = count * elem;
    let have = bytes.len() - offset;
    if have != want {
        return Err(format_err(
            bytes.len().min(offset + want),
            format!("payload holds {have} bytes, header declares {want}"),
        ));
    }
    match dtype {
        DTYPE_REAL => {
            let mut data = Vec::with_capacity(count);
            for chunk in bytes[offset..].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            Ok(SsvData::Real(Tensor::from_vec(&shape, data)?))
        }
        _ => {
            if ndim != 3 {
                return Err(format_err(5, format!("label volumes must be 3D, got {ndim}D")));
            }
            Ok(SsvData::Labels(LabelVolume::new(
                [shape[0], shape[1], shape[2]],
                bytes[offset..].to_vec(),
            )?))
        }
    }
}

/// Read a 3D intensity volume.
pub fn read_volume(path: &Path) -> Result<Volume> {
    match read_ssv(path)? {
        SsvData::Real(t) if t.rank() == 3 => Volume::new(t),
        SsvData::Real(t) => Err(Error::shape(format!(
            "expected a 3D intensity volume, got rank {}",
            t.rank()
        ))),
        SsvData::Labels(_) => Err(Error::shape(
            "expected an intensity volume, found labels",
        )),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    match read_ssv(path)? {
        SsvData::Labels(l) => Ok(l),
        SsvData::Real(_) => Err(Error::shape("expected labels, found an intensity volume")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rng_tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn volume_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let vol = Volume::new(rng_tensor(&mut rng, &[3, 4, 5])).unwrap();
        let path = dir.path().join("v.ssv");
        write_volume(&path, &vol).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.data.data(), vol.data.data());
        assert_eq!(back.dims(), vol.dims());
    }

    #[test]
    fn label_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let labels: Vec<u8> = (0..24).map(|_| rng.gen_range(0..4)).collect();
        let lab = LabelVolume::new([2, 3, 4], labels).unwrap();
        let path = dir.path().join("l.ssv");
        write_labels(&path, &lab).unwrap();
        assert_eq!(read_labels(&path).unwrap(), lab);
    }

    #[test]
    fn wrong_magic_reports_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ssv");
        std::fs::write(&path, b"NOPE\x00\x03rest").unwrap();
        match read_ssv(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn short_payload_reports_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.ssv");
        let vol = Volume::new(Tensor::full(&[2, 2, 2], 1.5)).unwrap();
        write_volume(&path, &vol).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 7);
        std::fs::write(&path, &bytes).unwrap();
        match read_ssv(&path) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset as usize, bytes.len());
                assert!(message.contains("declares"), "{message}");
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn oversized_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fat.ssv");
        let vol = Volume::new(Tensor::full(&[1, 1, 2], 0.0)).unwrap();
        write_volume(&path, &vol).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 3]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_ssv(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn zero_extent_is_flagged_at_its_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.ssv");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(SSV_MAGIC);
        bytes.push(DTYPE_REAL);
        bytes.push(3);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match read_ssv(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
