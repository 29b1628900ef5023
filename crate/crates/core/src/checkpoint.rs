//! Checkpoint directory: the full adaptation state plus its config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::pipeline::AdaptState;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CHECKPOINT_FORMAT: &str = "pgmm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub state: AdaptState,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, state: AdaptState) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config,
            state,
        }
    }

    /// Writes `<dir>/checkpoint.json`, creating `dir` if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CHECKPOINT_FILE), serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bytes = fs::read(dir.join(CHECKPOINT_FILE))?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)?;
        let format = value.get("format").and_then(|v| v.as_str()).unwrap_or("");
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
        if format != CHECKPOINT_FORMAT || version != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::Version(format!("{format} v{version}")));
        }
        Ok(serde_json::from_value(value)?)
    }
}
