//! Declarative run configuration, loadable from TOML.
//!
//! ```toml
//! [data]
//! label_set = "toy4"
//! clips_per_class = 250
//!
//! [vsa]
//! epochs = 3
//!
//! [gfc]
//! epochs = 8
//! lr = 0.003
//! ```
//!
//! Every section and key is optional; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabelSet;
use crate::net::ModelConfig;
use crate::optim::{Stage, TrainConfig};
use crate::sigproc::{Normalization, MODEL_RATE_HZ};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `toy4`, `hit3` or `dirg7`.
    pub label_set: String,
    pub clips_per_class: usize,
    pub duration_s: f64,
    pub fs_hz: u32,
    pub speed_rpm: f64,
    pub load_n: f64,
    pub split_train: f64,
    pub split_test: f64,
    pub seed: u64,
    pub snr_db: Option<f64>,
    pub normalization: Normalization,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            label_set: "toy4".into(),
            clips_per_class: 250,
            duration_s: 1.0,
            fs_hz: MODEL_RATE_HZ,
            speed_rpm: 6000.0,
            load_n: 900.0,
            split_train: 8.0,
            split_test: 2.0,
            seed: 7,
            snr_db: None,
            normalization: Normalization::Peak,
        }
    }
}

impl DataConfig {
    pub fn labels(&self) -> Result<LabelSet, ConfigError> {
        LabelSet::by_name(&self.label_set)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown label set {:?}", self.label_set)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Descriptions generated per clip.
    pub n_variants: usize,
    pub seed: u64,
    /// Descriptions per clip used as alignment targets (at most `n_variants`).
    pub vsa_targets_per_clip: usize,
    /// Include severity/location/action exchanges in the label-generation stage.
    pub follow_ups: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_variants: 3,
            seed: 11,
            vsa_targets_per_clip: 1,
            follow_ups: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub vsa: TrainConfig,
    pub gfc: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            vsa: TrainConfig {
                stage: Stage::Vsa,
                epochs: 3,
                ..TrainConfig::default()
            },
            gfc: TrainConfig {
                stage: Stage::Gfc,
                epochs: 8,
                ..TrainConfig::default()
            },
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        // a section's stage is implied by its name
        cfg.vsa.stage = Stage::Vsa;
        cfg.gfc.stage = Stage::Gfc;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn train(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::Vsa => &self.vsa,
            Stage::Gfc => &self.gfc,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.data.labels()?;
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for t in [&self.vsa, &self.gfc] {
            t.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.vsa.stage != Stage::Vsa || self.gfc.stage != Stage::Gfc {
            return Err(ConfigError::Invalid("stage sections must keep their own stage".into()));
        }
        if self.corpus.n_variants == 0 {
            return Err(ConfigError::Invalid("corpus.n_variants must be at least 1".into()));
        }
        Ok(())
    }
}
