//! TOML run configuration. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::codec::{CodecConfig, CodecPretrainConfig};
use crate::decoder::{DecoderConfig, DecoderPretrainConfig};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub decoder: Option<PathBuf>,
    pub codec: Option<PathBuf>,
    pub adapters: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecStageConfig {
    pub model: CodecConfig,
    pub pretrain: CodecPretrainConfig,
    /// Clean decodes used as the pretraining image pool.
    pub pool_images: usize,
}

impl Default for CodecStageConfig {
    fn default() -> Self {
        CodecStageConfig { model: CodecConfig::default(), pretrain: CodecPretrainConfig::default(), pool_images: 1024 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderStageConfig {
    pub model: DecoderConfig,
    pub pretrain: DecoderPretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub list: Vec<AttackSpec>,
    /// Images generated per sweep.
    pub count: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { list: AttackSpec::standard_suite(), count: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub fpr: f64,
    pub decoder: DecoderStageConfig,
    pub codec: CodecStageConfig,
    pub train: TrainConfig,
    pub attacks: AttackConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            fpr: 0.005,
            decoder: DecoderStageConfig::default(),
            codec: CodecStageConfig::default(),
            train: TrainConfig::default(),
            attacks: AttackConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.model.validate()?;
        self.train.validate()?;
        for a in &self.attacks.list {
            a.validate()?;
        }
        if !(self.fpr > 0.0 && self.fpr < 1.0) {
            return Err(Error::Config(format!("fpr must be in (0, 1), got {}", self.fpr)));
        }
        if self.codec.model.image_size != self.decoder.model.image_size() {
            return Err(Error::Config(format!(
                "codec image size {} does not match decoder output size {}",
                self.codec.model.image_size,
                self.decoder.model.image_size()
            )));
        }
        Ok(())
    }

    /// Writes the fully resolved configuration as `resolved_config.toml`
    /// inside `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("resolved_config.toml");
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}
