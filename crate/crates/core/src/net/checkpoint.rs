//! JSON checkpoint container.
//!
//! ```json
//! {
//!   "format": "msce-checkpoint",
//!   "version": 1,
//!   "config": { "input_size": 64, "in_channels": 1, "widths": [8, 16, 32],
//!               "head": { "pool": "max", "reduce": "sum", "scales": 6 } },
//!   "seed": 0,
//!   "params": [ { "name": "enc0.conv1.weight", "shape": [8, 1, 3, 3], "data": [...] }, ... ]
//! }
//! ```
//!
//! `params` lists every tensor in layer order (`enc*`, then `dec*` from the
//! deepest level up, then `out`), weight before bias. Floats are written with
//! shortest round-trip formatting, so loading restores them bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetConfig, NetParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "msce-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    format: &'static str,
    version: u32,
    config: &'a NetConfig,
    seed: u64,
    params: Vec<NamedTensor>,
}

#[derive(Deserialize)]
struct Header {
    format: Option<String>,
    version: Option<u32>,
}

#[derive(Deserialize)]
struct CheckpointIn {
    config: NetConfig,
    seed: u64,
    params: Vec<NamedTensor>,
}

pub fn to_json(params: &NetParams) -> Result<String> {
    let ckpt = CheckpointOut {
        format: CHECKPOINT_FORMAT,
        version: CHECKPOINT_VERSION,
        config: &params.config,
        seed: params.seed,
        params: params
            .named_tensors()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    serde_json::to_string(&ckpt).map_err(|e| Error::Format(e.to_string()))
}

pub fn from_json(text: &str) -> Result<NetParams> {
    let header: Header = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    if header.format.as_deref() != Some(CHECKPOINT_FORMAT) {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_FORMAT,
        });
    }
    match header.version {
        Some(CHECKPOINT_VERSION) => {}
        Some(v) => return Err(Error::UnsupportedVersion(v)),
        None => return Err(Error::Format("missing version".into())),
    }
    let ckpt: CheckpointIn =
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    let mut params = NetParams::zeros(&ckpt.config)?;
    params.seed = ckpt.seed;

    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != ckpt.params.len() {
        return Err(Error::SizeMismatch(format!(
            "expected {} tensors, found {}",
            expected.len(),
            ckpt.params.len()
        )));
    }
    for ((slot, (name, shape)), stored) in params.tensors_mut().zip(&expected).zip(ckpt.params) {
        if stored.name != *name || stored.shape != *shape || stored.data.len() != slot.len() {
            return Err(Error::SizeMismatch(format!(
                "tensor {} {:?} ({} values) does not fit {name} {shape:?}",
                stored.name,
                stored.shape,
                stored.data.len()
            )));
        }
        slot.data_mut().copy_from_slice(&stored.data);
    }
    Ok(params)
}

pub fn save_checkpoint(params: &NetParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_json(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NetParams> {
    from_json(&fs::read_to_string(path)?)
}
