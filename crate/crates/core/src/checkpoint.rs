//! Versioned JSON checkpoint container.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::training::{EpochRecord, TrainConfig, TrainState};

pub const CHECKPOINT_FORMAT: &str = "deregime-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Hash of the run configuration that produced this checkpoint.
    pub config_hash: String,
    pub config: TrainConfig,
    pub state: TrainState,
    pub history: Vec<EpochRecord>,
}

/// SHA-256 of the compact JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Checkpoint {
    pub fn new(config_hash: String, config: TrainConfig, state: TrainState, history: Vec<EpochRecord>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash,
            config,
            state,
            history,
        }
    }

    /// Writes through a temporary file so a crash never leaves a truncated checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let head: serde_json::Value = serde_json::from_slice(&bytes)?;
        let format = head.get("format").and_then(|v| v.as_str());
        if format != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Data(format!("{} is not a checkpoint file", path.display())));
        }
        let version = head.get("version").and_then(|v| v.as_u64());
        if version != Some(u64::from(CHECKPOINT_VERSION)) {
            return Err(Error::Data(format!(
                "checkpoint version {version:?} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let ck: Checkpoint = serde_json::from_value(head)?;
        let layout = crate::model::Layout::new(&ck.state.model.arch);
        if layout != ck.state.model.layout || ck.state.model.params.len() != layout.total {
            return Err(Error::Data("checkpoint parameters do not match its architecture".into()));
        }
        Ok(ck)
    }
}
