//! JSON checkpoints. Floats are written with round-trip precision, so a
//! reloaded model evaluates bit-identically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{NormStats, SplitPlan};
use crate::error::{Error, Result};
use crate::model::Model;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: Model,
    /// Statistics that standardized the training data.
    pub norm: Option<NormStats>,
    pub split: Option<SplitPlan>,
}

impl Checkpoint {
    pub fn new(model: Model, norm: Option<NormStats>, split: Option<SplitPlan>) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model,
            norm,
            split,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let value: serde_json::Value = serde_json::from_reader(reader)?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Contract("checkpoint has no format_version".into()))?;
        if found != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::CheckpointVersion {
                found: found as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ckpt: Checkpoint = serde_json::from_value(value)?;
        ckpt.model.config.validate()?;
        Ok(ckpt)
    }
}
