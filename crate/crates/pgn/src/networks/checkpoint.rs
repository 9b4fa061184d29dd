//! On-disk tensor containers.
//!
//! Two closely related formats share one layout: a magic string, a
//! little-endian `u32` manifest length, a JSON manifest, then the tensors as
//! raw little-endian `f32` in manifest order.
//!
//! * `PGNTNSR1` — a bare tensor list (teacher weight files);
//! * `PGNCKPT1` — a model checkpoint whose manifest also carries the
//!   backbone spec, head variant, seed and training step.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const TENSOR_MAGIC: &[u8; 8] = b"PGNTNSR1";
const CKPT_MAGIC: &[u8; 8] = b"PGNCKPT1";

/// A named tensor with `f32` storage.
#[derive(Debug, Clone)]
pub struct RawTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn write_container(
    path: &Path,
    magic: &[u8; 8],
    manifest: &serde_json::Value,
    tensors: &[RawTensor],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(magic)?;
    let json = serde_json::to_vec(manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for t in tensors {
        let expect: usize = t.shape.iter().product();
        if expect != t.data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {}: shape {:?} holds {} values, data has {}",
                t.name,
                t.shape,
                expect,
                t.data.len()
            )));
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_container(path: &Path, magic: &[u8; 8]) -> Result<(serde_json::Value, Vec<RawTensor>)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| {
        Error::Checkpoint(format!("cannot open {}: {e}", path.display()))
    })?);
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            String::from_utf8_lossy(&m)
        )));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let manifest: serde_json::Value =
        serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let entries: Vec<TensorEntry> = serde_json::from_value(
        manifest
            .get("tensors")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("manifest lacks tensor list".into()))?,
    )
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut tensors = Vec::with_capacity(entries.len());
    for e in entries {
        let n: usize = e.shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf).map_err(|_| {
            Error::Checkpoint(format!("{}: truncated tensor {}", path.display(), e.name))
        })?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(RawTensor {
            name: e.name,
            shape: e.shape,
            data,
        });
    }
    Ok((manifest, tensors))
}

/// Writes a bare tensor container.
pub fn write_raw_tensors(path: &Path, tensors: &[RawTensor]) -> Result<()> {
    let entries: Vec<TensorEntry> = tensors
        .iter()
        .map(|t| TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
        })
        .collect();
    let manifest = serde_json::json!({ "tensors": entries });
    write_container(path, TENSOR_MAGIC, &manifest, tensors)
}

/// Reads a bare tensor container.
pub fn read_raw_tensors(path: &Path) -> Result<Vec<RawTensor>> {
    Ok(read_container(path, TENSOR_MAGIC)?.1)
}

/// Checkpoint metadata stored alongside the tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub backbone: super::BackboneSpec,
    pub head: crate::heads::HeadVariant,
    pub seed: u64,
    pub step: u64,
}

/// Writes a model checkpoint: metadata manifest plus layer-ordered tensors.
pub fn write_checkpoint(path: &Path, meta: &CheckpointMeta, tensors: &[RawTensor]) -> Result<()> {
    let entries: Vec<TensorEntry> = tensors
        .iter()
        .map(|t| TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
        })
        .collect();
    let mut manifest =
        serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    manifest["tensors"] = serde_json::json!(entries);
    write_container(path, CKPT_MAGIC, &manifest, tensors)
}

/// Reads a model checkpoint.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, Vec<RawTensor>)> {
    let (manifest, tensors) = read_container(path, CKPT_MAGIC)?;
    let meta: CheckpointMeta =
        serde_json::from_value(manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((meta, tensors))
}
