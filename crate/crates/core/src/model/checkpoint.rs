//! Checkpoints: a JSON manifest plus a flat little-endian `f64` blob holding
//! every parameter tensor, row-major, in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Architecture, LacimModel, ModelDims};
use crate::error::{LacimError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub dims: ModelDims,
    pub arch: Architecture,
    pub m: usize,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

const FORMAT: &str = "lacim-checkpoint-v1";

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path>.bin` (parameters, extension replaced).
pub fn save_checkpoint(model: &LacimModel, path: &Path) -> Result<()> {
    let blob = blob_path(path);
    let tensors = model
        .param_names()
        .into_iter()
        .zip(model.params())
        .map(|(name, p)| TensorEntry {
            name,
            rows: p.rows(),
            cols: p.cols(),
        })
        .collect();
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        dims: model.dims,
        arch: model.arch,
        m: model.m(),
        blob: blob
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors,
    };
    let mut bytes = Vec::with_capacity(model.param_count() * 8);
    for p in model.params() {
        for v in p.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(&blob, bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LacimModel> {
    let malformed = |reason: String| LacimError::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if manifest.format != FORMAT {
        return Err(malformed(format!("unknown format {}", manifest.format)));
    }
    if manifest.m != manifest.dims.m {
        return Err(malformed("environment count disagrees with dims".into()));
    }
    let blob = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob)?;
    // Architecture and dims fix every shape; weights are overwritten below.
    let mut model = LacimModel::new(manifest.dims, manifest.arch, 0)?;
    let names = model.param_names();
    if names.len() != manifest.tensors.len() {
        return Err(malformed(format!(
            "expected {} tensors, manifest lists {}",
            names.len(),
            manifest.tensors.len()
        )));
    }
    let total: usize = manifest.tensors.iter().map(|t| t.rows * t.cols).sum();
    if bytes.len() != total * 8 {
        return Err(malformed(format!("blob holds {} bytes, expected {}", bytes.len(), total * 8)));
    }
    let mut offset = 0;
    for ((p, entry), name) in model.params_mut().into_iter().zip(&manifest.tensors).zip(&names) {
        if entry.name != *name || (entry.rows, entry.cols) != p.shape() {
            return Err(malformed(format!(
                "tensor {} ({}×{}) does not match {} {:?}",
                entry.name,
                entry.rows,
                entry.cols,
                name,
                p.shape()
            )));
        }
        for v in p.data_mut() {
            let chunk: [u8; 8] = bytes[offset..offset + 8].try_into().expect("8-byte chunk");
            *v = f64::from_le_bytes(chunk);
            offset += 8;
        }
    }
    Ok(model)
}
