//! Versioned JSON snapshots of a model after a step.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{OwrError, Result};
use crate::protocol::{EpisodeSchedule, OwrModel};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Index of the last completed step.
    pub step: usize,
    pub schedule: EpisodeSchedule,
    /// The experiment configuration as given, kept opaque here.
    pub config: serde_json::Value,
    pub model: OwrModel,
}

impl Checkpoint {
    pub fn new(
        step: usize,
        schedule: EpisodeSchedule,
        config: serde_json::Value,
        model: OwrModel,
    ) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            step,
            schedule,
            config,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| OwrError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| OwrError::io(path, e))?;
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
        }
        let header: Header = serde_json::from_str(&text)?;
        if header.format_version != FORMAT_VERSION {
            return Err(OwrError::VersionMismatch {
                expected: FORMAT_VERSION,
                found: header.format_version,
            });
        }
        Ok(serde_json::from_str(&text)?)
    }
}
