//! Resolved run configuration and its fingerprint.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::ThresholdSet;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Frames are resized to `size x size`.
    pub size: usize,
    pub stride: usize,
    /// Train/val/test fractions of the chronologically ordered windows.
    pub split: (f64, f64, f64),
    /// Threshold preset name or `custom:a,b,...`, in native units.
    pub thresholds: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { size: 128, stride: 1, split: (0.7, 0.1, 0.2), thresholds: "sevir".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Desk-scale setup on synthetic 64x64 advection with `K = 10`.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            train: TrainConfig::toy(),
            data: DataConfig { size: 64, thresholds: "synthetic".into(), ..DataConfig::default() },
        }
    }

    pub fn full() -> Self {
        Self { model: ModelConfig::full(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.size == 0 || self.data.size % crate::model::Model::SPATIAL_DIVISOR != 0 {
            return Err(Error::Config(format!(
                "data.size must be a positive multiple of {}, got {}",
                crate::model::Model::SPATIAL_DIVISOR,
                self.data.size
            )));
        }
        if self.data.stride == 0 {
            return Err(Error::Config("data.stride must be positive".into()));
        }
        ThresholdSet::preset(&self.data.thresholds)?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn thresholds(&self) -> Result<ThresholdSet> {
        ThresholdSet::preset(&self.data.thresholds)
    }
}
