//! SSCK checkpoint container.
//!
//! Little-endian layout: magic `"SSCK"`, u32 format version, u32 config
//! length + the canonical config text, u32 tensor count, then per tensor:
//! u16 name length, name bytes, u8 ndim, ndim × u32 extents, f64 payload.
//!
//! The tensor list holds every model parameter in store order, the Adam
//! moments under `.m1` / `.m2` name suffixes, and two bookkeeping scalars
//! `__state.step` and `__state.best_mdice`.

use std::fs;
use std::path::Path;

use spineseg_core::network::SegmentationModel;
use spineseg_core::{Error, Result, Tensor};

use crate::config::RunConfig;
use crate::optim::Adam;

pub const SSCK_MAGIC: &[u8; 4] = b"SSCK";
pub const SSCK_VERSION: u32 = 1;

const STEP_NAME: &str = "__state.step";
const BEST_NAME: &str = "__state.best_mdice";

/// Mutable training-loop state persisted alongside the parameters.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub best_mdice: f64,
    pub optimizer: Adam,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(tensor.rank() as u8);
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize model + optimizer + loop state under the canonical config.
pub fn save(
    path: &Path,
    config: &RunConfig,
    model: &SegmentationModel,
    state: &TrainState,
) -> Result<()> {
    let config_text = config.to_config_text();
    let n = model.params.len();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(SSCK_MAGIC);
    bytes.extend_from_slice(&SSCK_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    bytes.extend_from_slice(config_text.as_bytes());
    bytes.extend_from_slice(&((3 * n + 2) as u32).to_le_bytes());
    for entry in model.params.iter() {
        push_tensor(&mut bytes, &entry.name, &entry.value);
    }
    for (entry, m1) in model.params.iter().zip(&state.optimizer.m1) {
        push_tensor(&mut bytes, &format!("{}.m1", entry.name), m1);
    }
    for (entry, m2) in model.params.iter().zip(&state.optimizer.m2) {
        push_tensor(&mut bytes, &format!("{}.m2", entry.name), m2);
    }
    push_tensor(&mut bytes, STEP_NAME, &Tensor::scalar(state.step as f64));
    push_tensor(&mut bytes, BEST_NAME, &Tensor::scalar(state.best_mdice));
    fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Raw parse: the embedded config and the named tensor list.
pub fn load_raw(path: &Path) -> Result<(RunConfig, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4, "magic")? != SSCK_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected \"SSCK\"".into(),
        });
    }
    let version = cur.u32("version")?;
    if version != SSCK_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let config_len = cur.u32("config length")? as usize;
    let config_bytes = cur.take(config_len, "config text")?;
    let config_text = std::str::from_utf8(config_bytes).map_err(|e| Error::Format {
        offset: 12,
        message: format!("config text is not utf-8: {e}"),
    })?;
    let config = RunConfig::parse(config_text)?;
    let count = cur.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|e| Error::Format {
                offset: cur.pos as u64,
                message: format!("tensor name is not utf-8: {e}"),
            })?
            .to_string();
        let ndim = cur.take(1, "ndim")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = cur.take(numel * 8, "tensor payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::from_vec(&shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos as u64,
            message: format!("{} trailing bytes after tensor list", bytes.len() - cur.pos),
        });
    }
    Ok((config, tensors))
}

/// Rebuild the model and training state from a checkpoint.
///
/// Every model parameter (and its moments) must be present with matching
/// shape; all conflicts are reported together.
pub fn load(path: &Path) -> Result<(RunConfig, SegmentationModel, TrainState)> {
    let (config, tensors) = load_raw(path)?;
    let mut model = SegmentationModel::init(config.model.clone())?;
    let mut optimizer = Adam::new(config.train.optim.clone(), &model.params);
    let mut step = None;
    let mut best = None;

    let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    let names: Vec<String> = model.params.iter().map(|e| e.name.clone()).collect();
    let mut conflicts = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let want_shape = model
            .params
            .value(model.params.find(name).expect("own name"))
            .shape()
            .to_vec();
        for (suffix, kind) in [("", 0usize), (".m1", 1), (".m2", 2)] {
            let key = format!("{name}{suffix}");
            match by_name.remove(&key) {
                None => conflicts.push(format!("missing tensor {key:?}")),
                Some(t) if t.shape() != want_shape.as_slice() => {
                    conflicts.push(format!(
                        "tensor {key:?} has shape {:?}, model wants {:?}",
                        t.shape(),
                        want_shape
                    ));
                }
                Some(t) => match kind {
                    0 => {
                        let id = model.params.find(name).expect("own name");
                        model.params.set_value(id, t)?;
                    }
                    1 => optimizer.m1[i] = t,
                    _ => optimizer.m2[i] = t,
                },
            }
        }
    }
    match by_name.remove(STEP_NAME) {
        Some(t) => step = Some(t.data()[0] as u64),
        None => conflicts.push(format!("missing tensor {STEP_NAME:?}")),
    }
    match by_name.remove(BEST_NAME) {
        Some(t) => best = Some(t.data()[0]),
        None => conflicts.push(format!("missing tensor {BEST_NAME:?}")),
    }
    for leftover in by_name.keys() {
        conflicts.push(format!("unexpected tensor {leftover:?}"));
    }
    if !conflicts.is_empty() {
        conflicts.sort();
        return Err(Error::config(format!(
            "checkpoint does not match its config: {}",
            conflicts.join("; ")
        )));
    }
    let step = step.expect("checked above");
    let mut state = TrainState {
        step,
        best_mdice: best.expect("checked above"),
        optimizer,
    };
    state.optimizer.step = step;
    Ok((config, model, state))
}
