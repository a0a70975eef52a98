//! Named-tensor container: a JSON manifest listing `{name, shape, offset}`
//! for each tensor plus a blob of little-endian `f64` values. Offsets are in
//! bytes from the start of the blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ParamStore, Tensor};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("tensor {name:?} spans bytes {start}..{end} but blob has {len}")]
    Truncated {
        name: String,
        start: usize,
        end: usize,
        len: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    blob: String,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn blob_path(manifest: &Path, blob: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(blob)
}

/// Write `params` to `manifest` (JSON) and a sibling `.bin` blob.
pub fn write_checkpoint(
    manifest: &Path,
    params: &ParamStore,
    metadata: serde_json::Value,
) -> Result<(), CheckpointError> {
    let blob_name = manifest
        .with_extension("bin")
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint.bin".to_string());
    let mut bytes = Vec::with_capacity(params.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(params.len());
    for id in params.ids() {
        let t = params.get(id);
        tensors.push(TensorEntry {
            name: params.name(id).to_string(),
            shape: t.shape.clone(),
            offset: bytes.len(),
        });
        for x in &t.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let doc = Manifest {
        blob: blob_name.clone(),
        tensors,
        metadata,
    };
    let bin = blob_path(manifest, &blob_name);
    fs::write(&bin, &bytes).map_err(io_err(&bin))?;
    let json = serde_json::to_string_pretty(&doc)?;
    fs::write(manifest, json).map_err(io_err(manifest))?;
    Ok(())
}

/// Read a checkpoint back as a parameter store plus its metadata.
pub fn read_checkpoint(manifest: &Path) -> Result<(ParamStore, serde_json::Value), CheckpointError> {
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let doc: Manifest = serde_json::from_str(&text)?;
    let bin = blob_path(manifest, &doc.blob);
    let bytes = fs::read(&bin).map_err(io_err(&bin))?;
    let mut store = ParamStore::new();
    for entry in &doc.tensors {
        let n: usize = entry.shape.iter().product();
        let (start, end) = (entry.offset, entry.offset + n * 8);
        if end > bytes.len() {
            return Err(CheckpointError::Truncated {
                name: entry.name.clone(),
                start,
                end,
                len: bytes.len(),
            });
        }
        let data = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(&entry.name, Tensor::new(entry.shape.clone(), data));
    }
    Ok((store, doc.metadata))
}
