//! Persistence of trained models, histories, and reports.
//!
//! Checkpoints are single JSON documents carrying everything needed to
//! forecast and evaluate later: dimensions, weights, the fitted scaler,
//! the built mobility graph with its patch metadata, the data splits, and
//! the exact training configuration plus the hash of the dataset it was
//! trained on. Trained deterministically, the same dataset and config always
//! produce the byte-identical checkpoint, so its content hash doubles as a
//! provenance fingerprint.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Scaler, SplitSpans};
use crate::error::{Error, Result};
use crate::graph::{GravityHyper, PatchGraph, PatchMeta};
use crate::model::{AblationMode, ModelDims, ModelWeights};
use crate::train::{TrainConfig, TrainHistory};

/// Bumped whenever the checkpoint layout changes incompatibly.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Lowercase hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Content hash of any serializable value via its canonical JSON bytes.
pub fn json_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

/// Hash of a file's raw bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Write a value as pretty JSON (trailing newline included).
pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Read a JSON value back.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Everything a later forecast/evaluation run needs, in one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Hash of the dataset snapshot this model was trained on.
    pub dataset_hash: String,
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub hyper: GravityHyper,
    pub patches: Vec<PatchMeta>,
    pub graph: PatchGraph,
    pub spans: SplitSpans,
    pub scaler: Scaler,
    /// Weights of the best validation epoch.
    pub weights: ModelWeights,
    pub history: TrainHistory,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = load_json(path)?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format {} unsupported (expected {})",
                ckpt.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        ckpt.dims.validate()?;
        ckpt.weights.validate(&ckpt.dims)?;
        if ckpt.graph.n != ckpt.patches.len() {
            return Err(Error::Config(format!(
                "checkpoint graph has {} patches but metadata lists {}",
                ckpt.graph.n,
                ckpt.patches.len()
            )));
        }
        Ok(ckpt)
    }

    /// Canonical content hash of the whole checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        json_hash(self)
    }

    pub fn ablation(&self) -> AblationMode {
        self.config.ablation
    }
}
