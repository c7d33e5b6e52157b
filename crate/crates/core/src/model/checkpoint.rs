//! Binary checkpoint: magic, little-endian `u64` header length, JSON header,
//! then every tensor as little-endian `f32` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cnn::{CnnBaseline, CnnConfig};
use super::policy::{ModelKind, Policy};
use super::rasnet::{RasNet, RasNetConfig};
use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 8] = b"RGMPS001";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelKind,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(policy: &dyn Policy) -> Result<Vec<u8>> {
    let store = policy.store();
    let mut tensors = Vec::with_capacity(store.len());
    let mut payload = Vec::new();
    for (_, p) in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset: payload.len() as u64,
        });
        for &v in p.value.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        version: VERSION,
        model: policy.kind(),
        config: policy.config_json(),
        tensors,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save(policy: &dyn Policy, path: &Path) -> Result<()> {
    write_atomic(path, &encode(policy)?)
}

pub fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing RGMPS001 magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(Error::Checkpoint(format!("header length {len} exceeds file size")));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..len])
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    Ok((header, &body[len..]))
}

/// Copies payload tensors into `store`, checking every name and shape.
fn restore(store: &mut ParamStore, header: &CheckpointHeader, payload: &[u8]) -> Result<()> {
    if header.tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model expects {}",
            header.tensors.len(),
            store.len()
        )));
    }
    let expected: Vec<(String, Vec<usize>)> = store.iter().map(|(_, p)| (p.name.clone(), p.value.shape().to_vec())).collect();
    for (entry, (name, shape)) in header.tensors.iter().zip(expected) {
        if entry.name != name || entry.shape != shape || entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} {:?} ({}) does not match model tensor {name:?} {shape:?}",
                entry.name, entry.shape, entry.dtype
            )));
        }
        let id = store.id(&name).expect("name from store");
        let numel: usize = shape.iter().product();
        let start = entry.byte_offset as usize;
        let end = start + 4 * numel;
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("payload truncated at tensor {name:?}")))?;
        for (dst, chunk) in store.value_mut(id).data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<Box<dyn Policy>> {
    let (header, payload) = decode_header(bytes)?;
    let mut policy: Box<dyn Policy> = match header.model {
        ModelKind::Rasnet => {
            let cfg: RasNetConfig = serde_json::from_value(header.config.clone())
                .map_err(|e| Error::Checkpoint(format!("bad rasnet config: {e}")))?;
            Box::new(RasNet::new(cfg)?)
        }
        ModelKind::Cnn => {
            let cfg: CnnConfig = serde_json::from_value(header.config.clone())
                .map_err(|e| Error::Checkpoint(format!("bad cnn config: {e}")))?;
            Box::new(CnnBaseline::new(cfg)?)
        }
    };
    restore(policy.store_mut(), &header, payload)?;
    Ok(policy)
}

pub fn load(path: &Path) -> Result<Box<dyn Policy>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Rounds every stored value to `f32` precision, so an in-memory model
/// behaves exactly like its reloaded checkpoint.
pub fn round_to_f32(store: &mut ParamStore) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = *v as f32 as f64;
        }
    }
}
