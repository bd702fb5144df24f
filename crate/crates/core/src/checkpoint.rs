//! Parameter checkpoints.
//!
//! Layout: the 8 magic bytes `CBLNCKPT`, the JSON header length as a
//! little-endian `u64`, the UTF-8 JSON header, then every parameter's
//! values as little-endian `f64` in header order (sorted by name).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CBLNCKPT";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: serde_json::Value,
    seed: u64,
    parameters: Vec<Entry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn to_bytes(config: &RunConfig, store: &ParameterStore) -> Result<Vec<u8>> {
    let header = Header {
        config: config.to_flat_json()?,
        seed: config.seed,
        parameters: store
            .iter()
            .map(|(name, t)| Entry {
                name: name.to_owned(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(RunConfig, ParameterStore)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = 16u64
        .checked_add(len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| {
            Error::format(
                8,
                format!("header length {len} exceeds file size {}", bytes.len()),
            )
        })? as usize;
    let header: Header = serde_json::from_slice(&bytes[16..body])
        .map_err(|e| Error::format(16, format!("malformed checkpoint header: {e}")))?;
    let config = RunConfig::from_flat_json(&header.config)?;
    let mut store = ParameterStore::new();
    let mut at = body;
    for entry in header.parameters {
        let n: usize = entry.shape.iter().product();
        let end = at + n * 8;
        if end > bytes.len() {
            return Err(Error::format(
                bytes.len() as u64,
                format!(
                    "checkpoint ends before parameter `{}` (needs bytes {at}..{end})",
                    entry.name
                ),
            ));
        }
        let data = bytes[at..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(entry.name, Tensor::new(entry.shape, data)?)?;
        at = end;
    }
    if at != bytes.len() {
        return Err(Error::format(
            at as u64,
            format!("{} trailing bytes after parameters", bytes.len() - at),
        ));
    }
    Ok((config, store))
}

pub fn save(path: &Path, config: &RunConfig, store: &ParameterStore) -> Result<()> {
    fs::write(path, to_bytes(config, store)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(RunConfig, ParameterStore)> {
    from_bytes(&fs::read(path)?)
}
