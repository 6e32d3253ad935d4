//! Named-tensor container: a JSON manifest plus one blob of little-endian
//! `f32` values, row-major.
//!
//! The manifest lists each tensor's name, shape, byte offset and byte length
//! inside the blob. The blob lives next to the manifest under the file name
//! recorded in `"blob"`. Manifests are validated in full before any tensor
//! data is read.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AatError, Result};
use crate::numerics::Tensor2;

pub const FORMAT_TAG: &str = "aat-tensors-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn from_matrix(name: impl Into<String>, t: &Tensor2) -> Self {
        Self::new(name, vec![t.rows(), t.cols()], t.data().to_vec())
    }

    pub fn from_vector(name: impl Into<String>, v: &[f32]) -> Self {
        Self::new(name, vec![v.len()], v.to_vec())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    blob: String,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

/// Tensors in manifest order plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, t: NamedTensor) {
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| AatError::MissingTensor(name.to_string()))
    }

    /// The tensor `name` as a matrix, checked against the expected shape.
    pub fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Tensor2> {
        let t = self.get(name)?;
        if t.shape != [rows, cols] {
            return Err(AatError::ShapeMismatch {
                name: name.to_string(),
                reason: format!("expected [{rows}, {cols}], found {:?}", t.shape),
            });
        }
        Tensor2::new(rows, cols, t.data.clone())
    }

    pub fn vector(&self, name: &str, len: usize) -> Result<Vec<f32>> {
        let t = self.get(name)?;
        if t.shape != [len] {
            return Err(AatError::ShapeMismatch {
                name: name.to_string(),
                reason: format!("expected [{len}], found {:?}", t.shape),
            });
        }
        Ok(t.data.clone())
    }
}

fn blob_path_for(manifest: &Path) -> (PathBuf, String) {
    let stem = manifest
        .file_stem()
        .map_or_else(|| "tensors".to_string(), |s| s.to_string_lossy().into_owned());
    let name = format!("{stem}.bin");
    (manifest.with_file_name(&name), name)
}

/// Writes `container` to `manifest_path` and its sibling `<stem>.bin`.
pub fn save_container(manifest_path: &Path, container: &Container) -> Result<()> {
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(container.tensors.len());
    let mut blob = Vec::new();
    for t in &container.tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(AatError::InvalidParameter(format!(
                "duplicate tensor name {}",
                t.name
            )));
        }
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(AatError::ShapeMismatch {
                name: t.name.clone(),
                reason: format!("shape {:?} vs {} values", t.shape, t.data.len()),
            });
        }
        let offset = blob.len() as u64;
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
            length: blob.len() as u64 - offset,
        });
    }
    let (blob_path, blob_name) = blob_path_for(manifest_path);
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        blob: blob_name,
        meta: container.meta.clone(),
        tensors: entries,
    };
    fs::write(&blob_path, &blob).map_err(|e| AatError::io(&blob_path, e))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path, text).map_err(|e| AatError::io(manifest_path, e))?;
    Ok(())
}

pub fn load_container(manifest_path: &Path) -> Result<Container> {
    let corrupt = |reason: String| AatError::CorruptManifest {
        path: manifest_path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(manifest_path).map_err(|e| AatError::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    if manifest.format != FORMAT_TAG {
        return Err(corrupt(format!("unknown format tag {:?}", manifest.format)));
    }
    if manifest.blob.contains(['/', '\\']) {
        return Err(corrupt(format!("blob name {:?} is not a plain file name", manifest.blob)));
    }

    let mut seen = HashSet::new();
    for e in &manifest.tensors {
        if !seen.insert(e.name.as_str()) {
            return Err(corrupt(format!("duplicate tensor name {}", e.name)));
        }
        let numel: u64 = e.shape.iter().map(|&d| d as u64).product();
        if numel * 4 != e.length {
            return Err(AatError::ShapeMismatch {
                name: e.name.clone(),
                reason: format!("shape {:?} needs {} bytes, manifest says {}", e.shape, numel * 4, e.length),
            });
        }
    }

    let blob_path = manifest_path.with_file_name(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| AatError::io(&blob_path, e))?;
    let blob_len = blob.len() as u64;
    for e in &manifest.tensors {
        let end = e.offset.checked_add(e.length).ok_or_else(|| corrupt(format!("offset overflow for {}", e.name)))?;
        if end > blob_len {
            return Err(AatError::TruncatedBlob {
                path: blob_path.clone(),
                name: e.name.clone(),
                end,
                len: blob_len,
            });
        }
    }

    let tensors = manifest
        .tensors
        .into_iter()
        .map(|e| {
            let bytes = &blob[e.offset as usize..(e.offset + e.length) as usize];
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            NamedTensor {
                name: e.name,
                shape: e.shape,
                data,
            }
        })
        .collect();
    Ok(Container {
        meta: manifest.meta,
        tensors,
    })
}
