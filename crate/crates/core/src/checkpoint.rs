//! Versioned JSON checkpoints. Parameters are stored as a flat f64 array in
//! layer order (trunk then heads, weights then biases) and round-trip exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::Standardization;
use crate::error::{Error, Result};
use crate::nn::{Architecture, Network, NumericMode};
use crate::objectives::ObjectiveConfig;

pub const CHECKPOINT_FORMAT: &str = "selcls-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub arch: Architecture,
    pub numeric_mode: NumericMode,
    pub objective: ObjectiveConfig,
    /// Feature transform fitted on the training split, if one was used.
    pub standardization: Option<Standardization>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_network(
        net: &Network,
        objective: &ObjectiveConfig,
        config_hash: impl Into<String>,
        standardization: Option<Standardization>,
    ) -> Result<Self> {
        if !net.all_finite() {
            return Err(Error::numeric("refusing to checkpoint non-finite parameters"));
        }
        Ok(Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            arch: net.arch.clone(),
            numeric_mode: net.numeric_mode,
            objective: objective.clone(),
            standardization,
            params: net.flat_params(),
        })
    }

    pub fn to_network(&self) -> Result<Network> {
        let mut net = Network::zeros(self.arch.clone())?;
        net.numeric_mode = self.numeric_mode;
        net.set_flat_params(&self.params)?;
        if !net.all_finite() {
            return Err(Error::numeric("checkpoint holds non-finite parameters"));
        }
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::config(format!("not a checkpoint (format '{}')", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        if ck.objective.kind.head() != ck.arch.head {
            return Err(Error::config("checkpoint objective does not match its head"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_json(&fs::read_to_string(path)?)
    }
}
