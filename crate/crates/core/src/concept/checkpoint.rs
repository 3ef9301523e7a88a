//! Learned concept: the token embedding plus the cross-attention weight
//! deltas relative to the base model.
//!
//! File layout (all integers little endian):
//!
//! ```text
//! magic "ICCKPT\0\0" | u32 version | u64 n | n bytes JSON header
//! | u64 m | m bytes of f64 values | 32-byte SHA-256 of everything before it
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::TrainingConfig;
use crate::backend::{BackendDescriptor, ConceptToken, ToyBackend, TrainableBackend};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ICCKPT\0\0";
const DIGEST_LEN: usize = 32;

/// Provenance stored alongside the learned tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub training: TrainingConfig,
    pub backend: BackendDescriptor,
    pub source_digest: String,
    pub object_class: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptCheckpoint {
    pub token: ConceptToken,
    /// `tuned - base` for every trainable weight.
    pub ca_weight_deltas: BTreeMap<String, ArrayD<f64>>,
    pub manifest: CheckpointManifest,
    pub version: u32,
}

#[derive(Serialize, Deserialize)]
struct Header {
    manifest: CheckpointManifest,
    token_name: String,
    token_init_source: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the value blob, in elements.
    offset: usize,
}

/// Blob entry holding the token embedding.
const TOKEN_TENSOR: &str = "token.embedding";

impl ConceptCheckpoint {
    pub fn from_training<B: TrainableBackend>(
        base: &B,
        tuned: &B,
        cfg: &TrainingConfig,
        source_digest: String,
        object_class: &str,
    ) -> Result<Self> {
        let token = tuned
            .token(&cfg.token_name)
            .ok_or_else(|| Error::InvalidArgument(format!("token {} is not registered", cfg.token_name)))?
            .clone();
        let mut deltas = BTreeMap::new();
        for name in tuned.trainable_params(cfg.trainable).weights {
            let (Some(t), Some(b)) = (tuned.params().get(&name), base.params().get(&name)) else {
                return Err(Error::InvalidArgument(format!("unknown parameter {name}")));
            };
            deltas.insert(name, t - b);
        }
        Ok(Self {
            token,
            ca_weight_deltas: deltas,
            manifest: CheckpointManifest {
                training: cfg.clone(),
                backend: base.descriptor(),
                source_digest,
                object_class: object_class.to_string(),
                seed: cfg.seed,
            },
            version: CHECKPOINT_VERSION,
        })
    }

    /// Copy of `base` with the weight deltas added and the token registered.
    pub fn apply<B: TrainableBackend>(&self, base: &B) -> Result<B> {
        let desc = base.descriptor();
        if desc.latent_shape != self.manifest.backend.latent_shape {
            return Err(Error::shape(
                "checkpoint backend latent shape",
                format!("{:?}", self.manifest.backend.latent_shape),
                format!("{:?}", desc.latent_shape),
            ));
        }
        let mut tuned = base.clone();
        tuned.params_mut().add_deltas(&self.ca_weight_deltas)?;
        tuned.register_token(self.token.clone())?;
        Ok(tuned)
    }

    /// Rebuilds the base toy backend recorded in the manifest and returns it
    /// with its tuned counterpart.
    pub fn toy_backends(&self) -> Result<(ToyBackend, ToyBackend)> {
        let spec = self
            .manifest
            .backend
            .toy
            .ok_or_else(|| Error::BackendUnavailable("checkpoint was not trained on the toy backend".into()))?;
        let base = ToyBackend::new(spec)?;
        let tuned = self.apply(&base)?;
        Ok((base, tuned))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.encode(self.version)
    }

    fn encode(&self, version: u32) -> Result<Vec<u8>> {
        let mut values: Vec<f64> = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: &str, shape: Vec<usize>, data: &mut dyn Iterator<Item = f64>| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape,
                offset: values.len(),
            });
            values.extend(data);
        };
        push(TOKEN_TENSOR, vec![self.token.embedding.len()], &mut self.token.embedding.iter().copied());
        for (name, t) in &self.ca_weight_deltas {
            push(name, t.shape().to_vec(), &mut t.iter().copied());
        }
        let header = serde_json::to_vec(&Header {
            manifest: self.manifest.clone(),
            token_name: self.token.name.clone(),
            token_init_source: self.token.init_source.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(MAGIC.len() + 20 + header.len() + values.len() * 8 + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&((values.len() * 8) as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 4 + 8 + 8 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a concept checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("digest mismatch"));
        }
        let mut pos = 12;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body.get(pos..pos + n).ok_or_else(|| corrupt("truncated"))?;
            pos += n;
            Ok(s)
        };
        let header_len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(take(header_len)?).map_err(|e| corrupt(&e.to_string()))?;
        let blob_len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let blob = take(blob_len)?;
        if pos != body.len() || !blob_len.is_multiple_of(8) {
            return Err(corrupt("trailing bytes"));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let mut embedding = None;
        let mut deltas = BTreeMap::new();
        for entry in header.tensors {
            let len: usize = entry.shape.iter().product();
            let slice = values
                .get(entry.offset..entry.offset + len)
                .ok_or_else(|| corrupt(&format!("tensor {} exceeds blob", entry.name)))?;
            if entry.name == TOKEN_TENSOR {
                embedding = Some(slice.to_vec());
            } else {
                let t = ArrayD::from_shape_vec(IxDyn(&entry.shape), slice.to_vec()).map_err(|e| corrupt(&e.to_string()))?;
                deltas.insert(entry.name, t);
            }
        }
        let embedding = embedding.ok_or_else(|| corrupt("missing token embedding"))?;
        Ok(Self {
            token: ConceptToken::new(header.token_name, embedding, header.token_init_source)?,
            ca_weight_deltas: deltas,
            manifest: header.manifest,
            version,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Backend, ToySpec};

    fn checkpoint() -> ConceptCheckpoint {
        let base = ToyBackend::new(ToySpec {
            height: 4,
            width: 4,
            ..ToySpec::default()
        })
        .unwrap();
        let mut tuned = base.clone();
        let emb = base.word_embedding("style").unwrap().to_vec();
        tuned.register_token(ConceptToken::new("v*", emb, "style").unwrap()).unwrap();
        for name in tuned.trainable_params(crate::backend::ParamSelector::CrossAttentionKv).weights {
            tuned.params_mut().get_mut(&name).unwrap().mapv_inplace(|v| v * 1.01 + 0.003);
        }
        ConceptCheckpoint::from_training(&base, &tuned, &TrainingConfig::default(), "abc".into(), "chair").unwrap()
    }

    #[test]
    fn bytes_roundtrip_exactly() {
        let c = checkpoint();
        let bytes = c.to_bytes().unwrap();
        let back = ConceptCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn tampering_is_detected() {
        let bytes = checkpoint().to_bytes().unwrap();
        let mut bad = bytes.clone();
        let mid = bad.len() - 100;
        bad[mid] ^= 1;
        assert!(matches!(ConceptCheckpoint::from_bytes(&bad), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(ConceptCheckpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_is_checked() {
        let future = checkpoint().encode(CHECKPOINT_VERSION + 1).unwrap();
        assert!(matches!(
            ConceptCheckpoint::from_bytes(&future),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn apply_reproduces_tuned_weights() {
        let c = checkpoint();
        let (base, tuned) = c.toy_backends().unwrap();
        for (name, d) in &c.ca_weight_deltas {
            let diff = tuned.params().get(name).unwrap() - base.params().get(name).unwrap();
            assert!((diff - d).iter().all(|v| v.abs() < 1e-12));
        }
        assert_eq!(tuned.token("v*").unwrap(), &c.token);
        let again = c.apply(&base).unwrap();
        assert_eq!(again.params(), tuned.params());
    }
}
