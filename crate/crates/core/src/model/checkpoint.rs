//! Binary checkpoint container.
//!
//! Layout: 8-byte magic `SSADACK1`, little-endian `u64` header length, a JSON
//! header (config, dtype, iteration, optimizer settings, tensor table), then
//! raw little-endian parameter and momentum tensors in table order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamSet, SegModel, SegModelConfig, Sgd, SgdConfig};
use crate::error::{Error, IoContext, Result};
use crate::nn::Real;

const MAGIC: &[u8; 8] = b"SSADACK1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: SegModelConfig,
    optimizer: SgdConfig,
    iteration: u64,
    /// Free-form metadata (run epoch, config hash, ...).
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub model: SegModel<T>,
    pub optimizer: Sgd<T>,
    pub meta: serde_json::Value,
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    model: &SegModel<T>,
    optimizer: &Sgd<T>,
    meta: serde_json::Value,
) -> Result<()> {
    let layout = model.config().param_layout();
    let mut tensors = Vec::new();
    for (name, shape) in &layout {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
        });
    }
    for (name, shape) in &layout {
        tensors.push(TensorEntry {
            name: format!("momentum.{name}"),
            shape: shape.clone(),
        });
    }
    let header = Header {
        dtype: T::NAME.to_string(),
        config: model.config().clone(),
        optimizer: optimizer.config.clone(),
        iteration: optimizer.iteration,
        meta,
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header_bytes.len() + 2 * model.params.len() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for v in model.params.iter().chain(optimizer.velocity.iter()) {
        v.write_le(&mut out);
    }
    fs::write(path, out).at(path)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).at(path)?;
    let parse_err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: None,
        msg,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(parse_err("not a checkpoint file (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| parse_err("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| parse_err(e.to_string()))?;
    if header.dtype != T::NAME {
        return Err(parse_err(format!("checkpoint holds {} tensors, requested {}", header.dtype, T::NAME)));
    }
    let layout = header.config.param_layout();
    if header.tensors.len() != 2 * layout.len()
        || header
            .tensors
            .iter()
            .zip(layout.iter().chain(layout.iter()))
            .any(|(e, (_, s))| &e.shape != s)
    {
        return Err(parse_err("tensor table does not match model config".into()));
    }
    let mut data = &bytes[16 + hlen..];
    let read_set = |data: &mut &[u8]| -> Result<ParamSet<T>> {
        let mut tensors = Vec::new();
        for (_, shape) in &layout {
            let n: usize = shape.iter().product();
            let need = n * T::BYTES;
            if data.len() < need {
                return Err(parse_err("truncated tensor data".into()));
            }
            tensors.push(data[..need].chunks_exact(T::BYTES).map(T::read_le).collect());
            *data = &data[need..];
        }
        Ok(ParamSet { tensors })
    };
    let params = read_set(&mut data)?;
    let velocity = read_set(&mut data)?;
    if !data.is_empty() {
        return Err(parse_err("trailing bytes after tensor data".into()));
    }
    let model = SegModel::from_params(header.config, params)?;
    let optimizer = Sgd {
        config: header.optimizer,
        velocity,
        iteration: header.iteration,
    };
    Ok(Checkpoint {
        model,
        optimizer,
        meta: header.meta,
    })
}
