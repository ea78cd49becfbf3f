//! Versioned JSON snapshots of a policy and its optimizer.
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! saved-then-loaded policy is bit-identical to the original.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::ConsensusConfig;
use crate::envs::Task;
use crate::interaction::ConditionConfig;
use crate::optim::Adam;
use crate::policy::{EnsemblePolicy, PolicyConfig, PolicyError};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u64, expected: u32 },
    #[error("checkpoint has no version field")]
    MissingVersion,
    #[error("checkpoint parameters are inconsistent: {0}")]
    Policy(#[from] PolicyError),
    #[error("refusing to save non-finite parameter at index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub task: Task,
    pub condition: ConditionConfig,
    pub consensus: ConsensusConfig,
    pub seed: u64,
    /// Episodes completed when the snapshot was taken.
    pub episode: usize,
    pub policy: PolicyConfig,
    pub params: Vec<f64>,
    #[serde(default)]
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        task: Task,
        condition: ConditionConfig,
        consensus: ConsensusConfig,
        seed: u64,
        episode: usize,
        policy: &EnsemblePolicy,
        optimizer: Option<&Adam>,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            task,
            condition,
            consensus,
            seed,
            episode,
            policy: policy.config().clone(),
            params: policy.params().to_vec(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn policy(&self) -> Result<EnsemblePolicy, CheckpointError> {
        Ok(EnsemblePolicy::from_params(
            self.policy.clone(),
            self.params.clone(),
        )?)
    }

    pub fn to_json(&self) -> Result<String, CheckpointError> {
        if let Some(i) = self.params.iter().position(|p| !p.is_finite()) {
            return Err(CheckpointError::NonFinite(i));
        }
        Ok(serde_json::to_string(self)?)
    }

    /// Parses a checkpoint, checking the version before the body so that
    /// files from another format revision fail with a version error.
    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("version")
            .ok_or(CheckpointError::MissingVersion)?
            .as_u64()
            .ok_or(CheckpointError::MissingVersion)?;
        if found != u64::from(CHECKPOINT_VERSION) {
            return Err(CheckpointError::Version {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        // Re-parse from text: going through `Value` would lose the exact
        // float representation.
        let checkpoint: Checkpoint = serde_json::from_str(text)?;
        checkpoint.policy()?;
        Ok(checkpoint)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
