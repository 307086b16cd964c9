//! Checkpoint files: a JSON manifest next to a little-endian `f32` blob.
//!
//! `<stem>.json` lists every tensor with its shape, dtype and byte offset into
//! `<stem>.bin`, plus free-form metadata (architecture, quantizer, stage).
//! Values are stored as `f32`; a tensor whose values are already
//! `f32`-representable round-trips bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const FORMAT: &str = "biper-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub blob: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Reads `<stem>.json`, checking `format` and `version` before the rest.
pub fn read_manifest<T: serde::de::DeserializeOwned>(stem: &Path, format: &str, version: u32) -> Result<T> {
    let v: serde_json::Value = serde_json::from_slice(&fs::read(manifest_path(stem))?)?;
    let (f, ver) = (v.get("format").and_then(|f| f.as_str()), v.get("version").and_then(|v| v.as_u64()));
    if f != Some(format) || ver != Some(version as u64) {
        return Err(Error::Checkpoint(format!(
            "{} is not a {} v{} file (format {:?}, version {:?})",
            manifest_path(stem).display(),
            format,
            version,
            f.unwrap_or("missing"),
            ver
        )));
    }
    Ok(serde_json::from_value(v)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

/// Rounds every value to the nearest `f32`, the precision kept on disk.
pub fn round_to_storage(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: blob.len() as u64,
            });
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let blob_file = blob_path(stem);
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            blob: blob_file
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        if let Some(parent) = stem.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(&blob_file, &blob)?;
        fs::write(manifest_path(stem), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let manifest: Manifest = read_manifest(stem, FORMAT, VERSION)?;
        let blob_file = stem.parent().unwrap_or(Path::new("")).join(&manifest.blob);
        let blob = fs::read(&blob_file)?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
            }
            let n = numel(&e.shape);
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > blob.len() {
                return Err(Error::Format {
                    format: "checkpoint blob",
                    offset: e.offset,
                    msg: format!("tensor {} needs {} bytes, blob has {}", e.name, 4 * n, blob.len()),
                });
            }
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self {
            metadata: manifest.metadata,
            tensors,
        })
    }
}
