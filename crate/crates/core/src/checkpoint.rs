//! Checkpoint files.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes  "CDPCKPT\0"
//! version    u32 LE
//! header_len u64 LE
//! header     JSON (model config, tensor names/shapes, epoch, Adam scalars, DHSM state)
//! params     f64 LE, tensors in header order
//! adam_m     f64 LE, same order
//! adam_v     f64 LE, same order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{EmbeddingModel, ModelConfig, ParamTensor};
use crate::optim::AdamState;
use crate::sampler::DhsmState;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CDPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: EmbeddingModel,
    pub adam: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub dhsm: DhsmState,
    pub train_config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    epoch: usize,
    dhsm: DhsmState,
    adam: AdamHeader,
    tensors: Vec<TensorEntry>,
    buffers: Vec<String>,
    #[serde(default)]
    train_config: Option<serde_json::Value>,
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let tensors = ck.model.tensors();
    let header = Header {
        format_version: FORMAT_VERSION,
        model_config: ck.model.config().clone(),
        epoch: ck.epoch,
        dhsm: ck.dhsm,
        adam: AdamHeader {
            beta1: ck.adam.beta1,
            beta2: ck.adam.beta2,
            eps: ck.adam.eps,
            step: ck.adam.step,
        },
        tensors: tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        buffers: vec!["params".into(), "adam_m".into(), "adam_v".into()],
        train_config: ck.train_config.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 24 * ck.model.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let buffers = [
        tensors.iter().map(|t| t.data.as_slice()).collect::<Vec<_>>(),
        ck.adam.m.iter().map(Vec::as_slice).collect(),
        ck.adam.v.iter().map(Vec::as_slice).collect(),
    ];
    for buf in buffers {
        for v in buf.into_iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let err = |m: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message: m,
    };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(err("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(err(format!(
            "format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20usize.saturating_add(hlen))
        .ok_or_else(|| err("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| err(format!("corrupt header: {e}")))?;
    if header.format_version != version {
        return Err(err("header version disagrees with file version".into()));
    }
    let lens: Vec<usize> = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product())
        .collect();
    let total: usize = lens.iter().sum();
    let mut raw = &bytes[20 + hlen..];
    if raw.len() != 3 * total * 8 {
        return Err(err(format!(
            "payload has {} bytes, header declares {}",
            raw.len(),
            3 * total * 8
        )));
    }
    let mut read_buffer = || -> Vec<Vec<f64>> {
        lens.iter()
            .map(|&n| {
                let (chunk, rest) = raw.split_at(n * 8);
                raw = rest;
                chunk
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect()
            })
            .collect()
    };
    let params = read_buffer();
    let m = read_buffer();
    let v = read_buffer();
    let tensors = header
        .tensors
        .into_iter()
        .zip(params)
        .map(|(t, data)| ParamTensor {
            name: t.name,
            shape: t.shape,
            data,
        })
        .collect();
    let model = EmbeddingModel::from_tensors(header.model_config, tensors)
        .map_err(|e| err(e.to_string()))?;
    Ok(Checkpoint {
        model,
        adam: AdamState {
            beta1: header.adam.beta1,
            beta2: header.adam.beta2,
            eps: header.adam.eps,
            step: header.adam.step,
            m,
            v,
        },
        epoch: header.epoch,
        dhsm: header.dhsm,
        train_config: header.train_config,
    })
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ck)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
