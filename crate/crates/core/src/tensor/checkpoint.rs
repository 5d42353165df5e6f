//! Weights on disk: a JSON manifest next to a flat little-endian f64 blob.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in elements.
    pub offset: usize,
    pub dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    blob: String,
    config: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

/// Named tensors plus an arbitrary JSON configuration record.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path>.bin` (data, extension replaced).
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let blob = blob_path(path);
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(ckpt.tensors.len());
    let mut offset = 0;
    for (name, t) in &ckpt.tensors {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            dtype: "f64".into(),
        });
        offset += t.len();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        blob: blob
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string(),
        config: ckpt.config.clone(),
        tensors: entries,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&blob, bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    let blob = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(&blob, "blob length is not a multiple of 8"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        if e.dtype != "f64" {
            return Err(Error::format(path, format!("unsupported dtype {}", e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::format(path, format!("tensor {} runs past the blob", e.name)))?;
        tensors.push((e.name, Tensor::new(e.shape, data.to_vec())?));
    }
    Ok(Checkpoint {
        config: manifest.config,
        tensors,
    })
}
