use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named weight tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds `deltas` to the named tensors.
    pub fn add_deltas(&mut self, deltas: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
        for (name, delta) in deltas {
            let p = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
            if p.shape() != delta.shape() {
                return Err(Error::shape("add_deltas", format!("{:?}", p.shape()), format!("{:?}", delta.shape())));
            }
            *p += delta;
        }
        Ok(())
    }

    /// SHA-256 over name, shape and little-endian values of the selected tensors.
    pub fn digest(&self, mut include: impl FnMut(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            if !include(name) {
                continue;
            }
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.ndim() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ShapeManifest {
    dtype: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the flat array, in elements.
    offset: usize,
}

const DTYPE: &str = "f64-le";

/// Writes `<stem>.bin` (flat little-endian f64 values) and `<stem>.json`
/// (names, shapes and offsets).
pub fn write_param_files(store: &ParamStore, dir: &Path, stem: &str) -> Result<()> {
    let mut flat = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.iter() {
            flat.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = ShapeManifest {
        dtype: DTYPE.into(),
        tensors,
    };
    let bin = dir.join(format!("{stem}.bin"));
    let json = dir.join(format!("{stem}.json"));
    std::fs::write(&bin, flat).map_err(|e| Error::io(&bin, e))?;
    std::fs::write(&json, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

pub fn read_param_files(dir: &Path, stem: &str) -> Result<ParamStore> {
    let bin = dir.join(format!("{stem}.bin"));
    let json = dir.join(format!("{stem}.json"));
    let manifest: ShapeManifest =
        serde_json::from_slice(&std::fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
    if manifest.dtype != DTYPE {
        return Err(Error::InvalidArgument(format!("unsupported dtype {}", manifest.dtype)));
    }
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidArgument("parameter blob length is not a multiple of 8".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut store = ParamStore::default();
    for entry in manifest.tensors {
        let len: usize = entry.shape.iter().product();
        let slice = values.get(entry.offset..entry.offset + len).ok_or_else(|| {
            Error::InvalidArgument(format!("tensor {} exceeds parameter blob", entry.name))
        })?;
        let t = ArrayD::from_shape_vec(IxDyn(&entry.shape), slice.to_vec())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        store.insert(entry.name, t);
    }
    Ok(store)
}
