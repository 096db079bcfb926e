//! Versioned single-file checkpoints.
//!
//! Layout: 8-byte magic, format version (u32 LE), manifest length (u64 LE),
//! the JSON manifest, then every array as raw little-endian f64. The manifest
//! records each array's name, shape, offset, length and SHA-256.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Ontology, Vocab};
use crate::error::{Error, Result};
use crate::model::Luna;
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::trainer::{EpochRecord, TrainConfig};

pub const MAGIC: &[u8; 8] = b"LUNACKPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

/// Loop bookkeeping needed to resume training exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub best_dev_joint: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
    pub finished: bool,
    pub history: Vec<EpochRecord>,
}

impl Default for TrainerState {
    fn default() -> Self {
        TrainerState {
            epoch: 0,
            step: 0,
            best_dev_joint: -1.0,
            best_epoch: 0,
            bad_epochs: 0,
            finished: false,
            history: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
    sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    config: TrainConfig,
    vocab: Vec<String>,
    ontology: BTreeMap<String, Vec<String>>,
    trainer: TrainerState,
    adam_steps: u64,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vec<String>,
    pub ontology: BTreeMap<String, Vec<String>>,
    pub trainer: TrainerState,
    pub adam_steps: u64,
    /// Parameters as `param:<name>`, optimizer moments as `adam.m:<name>` / `adam.v:<name>`.
    pub arrays: Vec<(String, Tensor)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn checksum(data: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in data {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

impl Checkpoint {
    pub fn capture(
        config: &TrainConfig,
        model: &Luna,
        adam: &AdamState,
        trainer: &TrainerState,
    ) -> Result<Self> {
        let mut arrays = Vec::new();
        for (_, p) in model.store.iter() {
            arrays.push((format!("param:{}", p.name), p.tensor.clone()));
        }
        if adam.is_initialized() {
            for (kind, bufs) in [("adam.m", &adam.m), ("adam.v", &adam.v)] {
                for ((_, p), buf) in model.store.iter().zip(bufs.iter()) {
                    let t = Tensor::new(p.tensor.shape().to_vec(), buf.clone())?;
                    arrays.push((format!("{kind}:{}", p.name), t));
                }
            }
        }
        Ok(Checkpoint {
            config: config.clone(),
            vocab: model.vocab.tokens().to_vec(),
            ontology: model.ontology.to_map(),
            trainer: trainer.clone(),
            adam_steps: adam.steps,
            arrays,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut blob: Vec<u8> = Vec::new();
        for (name, t) in &self.arrays {
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
                len: t.len() as u64,
                sha256: checksum(t.data()),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            ontology: self.ontology.clone(),
            trainer: self.trainer.clone(),
            adam_steps: self.adam_steps,
            arrays: entries,
        };
        let json =
            serde_json::to_vec(&manifest).map_err(|e| Error::json("checkpoint manifest", &e))?;
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(Error::Integrity(
                "not a checkpoint file (bad magic or truncated header)".into(),
            ));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Integrity(format!(
                "checkpoint format version {version} is not supported; this build reads version {FORMAT_VERSION}"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[HEADER_LEN..];
        if mlen > body.len() {
            return Err(Error::Integrity(
                "checkpoint truncated inside the manifest".into(),
            ));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen])
            .map_err(|e| Error::Integrity(format!("bad manifest: {e}")))?;
        if manifest.version != version {
            return Err(Error::Integrity(
                "manifest and header versions disagree".into(),
            ));
        }
        let blob = &body[mlen..];
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        let mut expected_end = 0u64;
        for e in &manifest.arrays {
            let end = e.offset + e.len * 8;
            if end as usize > blob.len() {
                return Err(Error::Integrity(format!(
                    "checkpoint truncated inside array `{}`",
                    e.name
                )));
            }
            if e.shape.iter().product::<usize>() as u64 != e.len {
                return Err(Error::Integrity(format!(
                    "array `{}`: shape disagrees with length",
                    e.name
                )));
            }
            let data: Vec<f64> = blob[e.offset as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if checksum(&data) != e.sha256 {
                return Err(Error::Integrity(format!(
                    "checksum mismatch in array `{}`",
                    e.name
                )));
            }
            expected_end = expected_end.max(end);
            arrays.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        if expected_end as usize != blob.len() {
            return Err(Error::Integrity(
                "trailing bytes after the last array".into(),
            ));
        }
        Ok(Checkpoint {
            config: manifest.config,
            vocab: manifest.vocab,
            ontology: manifest.ontology,
            trainer: manifest.trainer,
            adam_steps: manifest.adam_steps,
            arrays,
        })
    }

    /// Writes through a temporary file so a crash never leaves a half-written checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds the model, optimizer state and loop state.
    pub fn into_parts(self) -> Result<(Luna, AdamState, TrainerState)> {
        let vocab = Vocab::from_tokens(self.vocab)?;
        let ontology = Ontology::new(self.ontology)?;
        let mut model = Luna::new(
            self.config.model_config(),
            vocab,
            ontology,
            self.config.seed,
        )?;
        let mut by_name: BTreeMap<String, Tensor> = self.arrays.into_iter().collect();
        fn take(
            by_name: &mut BTreeMap<String, Tensor>,
            name: String,
            shape: &[usize],
        ) -> Result<Tensor> {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Integrity(format!("checkpoint lacks array `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::Integrity(format!(
                    "array `{name}` has shape {:?}, model expects {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        }
        let names: Vec<(String, Vec<usize>)> = model
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.tensor.shape().to_vec()))
            .collect();
        for ((name, shape), p) in names.iter().zip(model.store.iter_mut()) {
            p.tensor = take(&mut by_name, format!("param:{name}"), shape)?;
        }
        let has_adam = by_name.keys().any(|k| k.starts_with("adam."));
        let adam = if has_adam {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (name, shape) in &names {
                m.push(take(&mut by_name, format!("adam.m:{name}"), shape)?.into_data());
                v.push(take(&mut by_name, format!("adam.v:{name}"), shape)?.into_data());
            }
            AdamState::from_parts(m, v, self.adam_steps)
        } else {
            AdamState::new(&model.store)
        };
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Integrity(format!(
                "checkpoint has unexpected array `{extra}`"
            )));
        }
        Ok((model, adam, self.trainer))
    }
}

pub fn save(
    path: &Path,
    config: &TrainConfig,
    model: &Luna,
    adam: &AdamState,
    trainer: &TrainerState,
) -> Result<()> {
    Checkpoint::capture(config, model, adam, trainer)?.save(path)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Model only, for evaluation.
pub fn load_model(path: &Path) -> Result<(Luna, TrainConfig)> {
    let ck = load(path)?;
    let cfg = ck.config.clone();
    let (model, _, _) = ck.into_parts()?;
    Ok((model, cfg))
}
