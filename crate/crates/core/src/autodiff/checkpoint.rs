//! Parameter checkpoint files.
//!
//! Layout: one line of JSON manifest terminated by `\n`, followed by the raw
//! payload of little-endian IEEE-754 `f64` values. The manifest maps every
//! tensor name to its shape and byte offset within the payload and carries
//! free-form metadata (run configuration, optimizer step, ...).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const FORMAT: &str = "vdformer-params-v1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    payload_bytes: usize,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// Decoded checkpoint contents, in file order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode(tensors: &[(&str, &Tensor)], meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len() * 8;
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        payload_bytes: offset,
        tensors: entries,
        meta: meta.clone(),
    };
    let mut out = serde_json::to_vec(&manifest)?;
    out.push(b'\n');
    out.reserve(offset);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing manifest line"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format(path, format!("bad manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::format(
            path,
            format!("unknown format `{}`", manifest.format),
        ));
    }
    let payload = &bytes[nl + 1..];
    if payload.len() != manifest.payload_bytes {
        return Err(Error::format(
            path,
            format!(
                "payload is {} bytes, manifest says {}",
                payload.len(),
                manifest.payload_bytes
            ),
        ));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let n = numel(&e.shape);
        let end = e.offset + n * 8;
        if end > payload.len() || e.shape.is_empty() {
            return Err(Error::format(path, format!("tensor `{}` out of bounds", e.name)));
        }
        let data = payload[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(e.shape, data)
            .map_err(|err| Error::format(path, format!("tensor `{}`: {err}", e.name)))?;
        tensors.push((e.name, t));
    }
    Ok(Checkpoint {
        tensors,
        meta: manifest.meta,
    })
}

pub fn write(path: &Path, tensors: &[(&str, &Tensor)], meta: &serde_json::Value) -> Result<()> {
    let bytes = encode(tensors, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Copies checkpoint values into `store`. Every store parameter must be
/// present with the same shape; the first offender is named in the error.
pub fn load_into(store: &mut ParamStore, ckpt: &Checkpoint) -> Result<()> {
    for p in store.iter_mut() {
        let t = ckpt.get(&p.name).ok_or_else(|| {
            Error::ParamMismatch(format!("checkpoint has no parameter `{}`", p.name))
        })?;
        if t.shape() != p.value.shape() {
            return Err(Error::ParamMismatch(format!(
                "`{}` has shape {:?} in checkpoint but {:?} in model",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
    }
    Ok(())
}

/// `(name, value)` pairs of every parameter in store order.
pub fn store_entries(store: &ParamStore) -> Vec<(&str, &Tensor)> {
    store.iter().map(|p| (p.name.as_str(), &p.value)).collect()
}
