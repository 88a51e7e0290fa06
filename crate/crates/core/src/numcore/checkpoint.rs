//! Directory checkpoints: one raw little-endian blob plus `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const DATA_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the data file.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub data_file: String,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata (step counters, config echoes).
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Write `tensors` into `dir` (created if missing), replacing previous contents.
pub fn save<T: Real>(dir: &Path, tensors: &[(String, &Tensor<T>)], meta: serde_json::Value) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset: blob.len(),
        });
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    let manifest = Manifest {
        format_version: 1,
        data_file: DATA_FILE.to_string(),
        tensors: entries,
        meta,
    };
    let data_path = dir.join(DATA_FILE);
    fs::write(&data_path, &blob).map_err(|e| Error::io(&data_path, e))?;
    let manifest_path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Load every tensor listed in the manifest, in manifest order.
pub fn load<T: Real>(dir: &Path) -> Result<(Manifest, Vec<(String, Tensor<T>)>)> {
    let manifest = read_manifest(dir)?;
    let data_path = dir.join(&manifest.data_file);
    let blob = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if entry.dtype != T::DTYPE {
            return Err(Error::Schema(format!(
                "tensor {} stored as {}, requested {}",
                entry.name,
                entry.dtype,
                T::DTYPE
            )));
        }
        let len: usize = entry.shape.iter().product();
        let end = entry.offset + len * T::BYTES;
        if end > blob.len() {
            return Err(Error::Schema(format!(
                "tensor {} overruns the data file ({} > {} bytes)",
                entry.name,
                end,
                blob.len()
            )));
        }
        let data = blob[entry.offset..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        out.push((entry.name.clone(), Tensor::from_vec(&entry.shape, data)?));
    }
    Ok((manifest, out))
}
