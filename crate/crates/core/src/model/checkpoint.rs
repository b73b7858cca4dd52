//! Checkpoints: a flat little-endian f32 blob plus a JSON sidecar that
//! lists every tensor, the architecture hash, counters, RNG state and the
//! configuration snapshot.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SegmentationModel;
use crate::error::{Error, Result};
use crate::nn::{Param, Parameterized};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    pub offset: usize,
}

/// Resumable position of a ChaCha generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: String,
    pub stream: u64,
    /// `u128` word position, decimal.
    pub word_pos: String,
}

impl RngSnapshot {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngSnapshot {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |m: &str| Error::Checkpoint(format!("rng snapshot: {m}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed is not 32 bytes"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word_pos"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    /// `pretrain` or `finetune`.
    pub kind: String,
    /// Hash over the names and shapes of the model tensors.
    pub architecture_hash: String,
    pub blob_sha256: String,
    pub epoch: u64,
    pub step: u64,
    pub rng: BTreeMap<String, RngSnapshot>,
    pub config: serde_json::Value,
    /// Model tensors followed by any optimizer tensors (`adam.m.*`, `adam.v.*`).
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub data: Vec<f32>,
}

fn is_model_tensor(name: &str) -> bool {
    !name.starts_with("adam.")
}

/// SHA-256 over `name:shape` lines of the model tensors.
pub fn architecture_hash<'a>(entries: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> String {
    let mut h = Sha256::new();
    for (name, shape) in entries {
        if is_model_tensor(name) {
            h.update(format!("{name}:{shape:?}\n").as_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn blob_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                format: CHECKPOINT_FORMAT,
                kind: kind.to_string(),
                architecture_hash: String::new(),
                blob_sha256: String::new(),
                epoch: 0,
                step: 0,
                rng: BTreeMap::new(),
                config,
                tensors: Vec::new(),
            },
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], values: &[f32]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.meta.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: self.data.len(),
        });
        self.data.extend_from_slice(values);
    }

    /// Appends every parameter of `module` under `prefix`.
    pub fn push_module(&mut self, prefix: &str, module: &impl Parameterized) {
        module.visit(prefix, &mut |name, p| self.push(name, &p.shape, &p.value));
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.meta.tensors.iter().find(|t| t.name == name).map(|t| {
            let n: usize = t.shape.iter().product();
            (t.shape.as_slice(), &self.data[t.offset..t.offset + n])
        })
    }

    fn seal(&mut self) {
        self.meta.architecture_hash = architecture_hash(
            self.meta
                .tensors
                .iter()
                .map(|t| (t.name.as_str(), t.shape.as_slice())),
        );
        self.meta.blob_sha256 = hex::encode(Sha256::digest(blob_bytes(&self.data)));
    }

    pub fn sidecar(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the blob to `path` and the metadata next to it.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.seal();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, blob_bytes(&self.data)).map_err(|e| Error::io(path, e))?;
        let meta = Self::sidecar(path);
        let text = serde_json::to_string_pretty(&self.meta).expect("serializable metadata");
        fs::write(&meta, text).map_err(|e| Error::io(&meta, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta_path = Self::sidecar(path);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| Error::parse(&meta_path, e.to_string()))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {}", meta.format)));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if hex::encode(Sha256::digest(&bytes)) != meta.blob_sha256 {
            return Err(Error::Checkpoint(format!(
                "{} does not match its recorded digest",
                path.display()
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        for t in &meta.tensors {
            if t.offset + t.shape.iter().product::<usize>() > data.len() {
                return Err(Error::Checkpoint(format!("tensor {} exceeds the blob", t.name)));
            }
        }
        let ckpt = Checkpoint { meta, data };
        let hash = architecture_hash(
            ckpt.meta
                .tensors
                .iter()
                .map(|t| (t.name.as_str(), t.shape.as_slice())),
        );
        if hash != ckpt.meta.architecture_hash {
            return Err(Error::Checkpoint("architecture hash mismatch".into()));
        }
        Ok(ckpt)
    }

    /// Copies tensors into every parameter of `module` under `prefix`. All
    /// names must be present with matching shapes.
    pub fn restore_module(&self, prefix: &str, module: &mut impl Parameterized) -> Result<()> {
        let mut bad = Vec::new();
        module.visit_mut(prefix, &mut |name, p| match self.tensor(name) {
            Some((shape, values)) if shape == p.shape.as_slice() => {
                p.value.copy_from_slice(values)
            }
            Some((shape, _)) => bad.push(format!("{name}: expected {:?}, found {shape:?}", p.shape)),
            None => bad.push(format!("{name}: missing")),
        });
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ParamMismatch(bad))
        }
    }
}

/// Which parameters a transfer touched.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadManifest {
    /// Encoder parameters copied from the checkpoint.
    pub loaded: Vec<String>,
    /// Model parameters left at their fresh initialization.
    pub skipped: Vec<String>,
    /// Checkpoint tensors not used (self-supervised heads, optimizer state).
    pub ignored: Vec<String>,
}

/// Replaces the encoder weights of `model` with those of `checkpoint`,
/// leaving the decoder as initialized. Fails without modifying the model
/// when any encoder parameter is missing or has a different shape.
pub fn load_pretrained_encoder(
    model: &mut SegmentationModel,
    checkpoint: &Checkpoint,
) -> Result<LoadManifest> {
    let mut mismatched = Vec::new();
    model.encoder.visit("encoder.", &mut |name, p: &Param| match checkpoint.tensor(name) {
        Some((shape, _)) if shape == p.shape.as_slice() => {}
        Some((shape, _)) => {
            mismatched.push(format!("{name}: expected {:?}, found {shape:?}", p.shape))
        }
        None => mismatched.push(format!("{name}: missing")),
    });
    if !mismatched.is_empty() {
        return Err(Error::ParamMismatch(mismatched));
    }
    checkpoint.restore_module("encoder.", &mut model.encoder)?;
    let mut manifest = LoadManifest::default();
    model.encoder.visit("encoder.", &mut |name, _| manifest.loaded.push(name.to_string()));
    model
        .decoder
        .visit("decoder.", &mut |name, _| manifest.skipped.push(name.to_string()));
    manifest.ignored = checkpoint
        .meta
        .tensors
        .iter()
        .filter(|t| !manifest.loaded.contains(&t.name))
        .map(|t| t.name.clone())
        .collect();
    Ok(manifest)
}
