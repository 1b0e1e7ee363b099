//! The run configuration document shared by every CLI command.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::eval::{ProbeConfig, MIN_TEST_GROUPS};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const RUN_CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Parallel groups used for transfer (held-out renders top up the test split).
    pub min_test_groups: usize,
    /// Re-renders per multi-reference row for the distractor baseline.
    pub distractors: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            min_test_groups: MIN_TEST_GROUPS,
            distractors: 20,
            seed: 5,
        }
    }
}

/// Everything a run depends on. Missing keys take the defaults below
/// (pilot-scale model widths); unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: RUN_CONFIG_VERSION,
            corpus: CorpusConfig::default(),
            model: ModelConfig::pilot(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_slice(bytes).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != RUN_CONFIG_VERSION {
            return Err(Error::Version {
                what: "run config",
                found: cfg.version,
                expected: RUN_CONFIG_VERSION,
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        self.model.resolve(crate::model::Variant::Proposed)?;
        if self.eval.min_test_groups == 0 {
            return Err(Error::Config("min_test_groups must be positive".into()));
        }
        Ok(())
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}
