//! "Tensor bundle" files: a JSON manifest next to one binary blob of
//! row-major little-endian scalars, each tensor starting on a 64-byte
//! boundary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;

pub const BUNDLE_FORMAT: &str = "tensor-bundle";
pub const BUNDLE_VERSION: u32 = 1;
pub const BUNDLE_ALIGN: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> u64 {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset_bytes: u64,
    pub length_bytes: u64,
}

/// Manifest contents. Unknown fields are ignored on read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format: String,
    pub version: u32,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

/// Tensor handed to [`write_bundle`].
pub struct TensorSource<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

fn blob_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `manifest_path` and its sibling `.bin` blob (f64 storage).
pub fn write_bundle(
    manifest_path: &Path,
    config: Option<&ModelConfig>,
    metadata: BTreeMap<String, serde_json::Value>,
    tensors: &[TensorSource<'_>],
) -> Result<()> {
    let blob_path = blob_path_for(manifest_path);
    let blob_name = blob_path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidInput(format!("bad bundle path {}", manifest_path.display())))?
        .to_string();

    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for t in tensors {
        let numel: usize = t.shape.iter().product();
        if numel != t.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{}: shape {:?} vs {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        let pad = (BUNDLE_ALIGN - blob.len() as u64 % BUNDLE_ALIGN) % BUNDLE_ALIGN;
        blob.resize(blob.len() + pad as usize, 0);
        let offset = blob.len() as u64;
        for v in t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: t.name.clone(),
            dtype: DType::F64,
            shape: t.shape.clone(),
            offset_bytes: offset,
            length_bytes: blob.len() as u64 - offset,
        });
    }
    let manifest = BundleManifest {
        format: BUNDLE_FORMAT.to_string(),
        version: BUNDLE_VERSION,
        blob: blob_name,
        config: config.copied(),
        metadata,
        tensors: entries,
    };
    if let Some(parent) = manifest_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))?;
    Ok(())
}

/// Decoded tensor: shape plus values promoted to f64.
pub type LoadedTensor = (Vec<usize>, Vec<f64>);

/// Reads a bundle, checking every entry against the blob.
pub fn read_bundle(manifest_path: &Path) -> Result<(BundleManifest, BTreeMap<String, LoadedTensor>)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: BundleManifest =
        serde_json::from_str(&text).map_err(|e| Error::corrupt(manifest_path, format!("malformed manifest: {e}")))?;
    if manifest.format != BUNDLE_FORMAT {
        return Err(Error::corrupt(
            manifest_path,
            format!("format '{}' is not {BUNDLE_FORMAT}", manifest.format),
        ));
    }
    let blob_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new(""))
        .join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::corrupt(manifest_path, format!("missing blob {}", blob_path.display())),
        _ => Error::io(&blob_path, e),
    })?;

    let mut out = BTreeMap::new();
    for t in &manifest.tensors {
        let numel: u64 = t.shape.iter().map(|&s| s as u64).product();
        if t.length_bytes != numel * t.dtype.size() {
            return Err(Error::corrupt(
                manifest_path,
                format!("{}: {} bytes for shape {:?}", t.name, t.length_bytes, t.shape),
            ));
        }
        if t.offset_bytes % BUNDLE_ALIGN != 0 {
            return Err(Error::corrupt(manifest_path, format!("{}: misaligned offset", t.name)));
        }
        let end = t
            .offset_bytes
            .checked_add(t.length_bytes)
            .filter(|&e| e <= blob.len() as u64)
            .ok_or_else(|| {
                Error::corrupt(
                    manifest_path,
                    format!("{}: extends past end of blob ({} bytes)", t.name, blob.len()),
                )
            })?;
        let bytes = &blob[t.offset_bytes as usize..end as usize];
        let values: Vec<f64> = match t.dtype {
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                .collect(),
        };
        if out.insert(t.name.clone(), (t.shape.clone(), values)).is_some() {
            return Err(Error::corrupt(manifest_path, format!("duplicate tensor {}", t.name)));
        }
    }
    Ok((manifest, out))
}
