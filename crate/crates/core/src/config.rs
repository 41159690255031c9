//! Declarative run configuration (TOML). Every field defaults to the
//! reference hyperparameters, so an empty document is the full-size setup.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conditioning::CondNetConfig;
use crate::data::{DeskCorpusConfig, SegmentSpec, DEFAULT_TARGET_PEAK};
use crate::discriminators::DiscConfig;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::model::ModelConfig;
use crate::train::{Stage, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub segment: SegmentSpec,
    pub target_peak: f64,
    pub desk: DeskCorpusConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { manifest: None, segment: SegmentSpec::default(), target_peak: DEFAULT_TARGET_PEAK, desk: DeskCorpusConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub temperature: f64,
    pub bin_width: f64,
    pub rtf_warmup: usize,
    pub rtf_files: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { temperature: 1.0, bin_width: 0.05, rtf_warmup: 2, rtf_files: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self, stage: Option<Stage>) -> Result<()> {
        self.model.validate()?;
        self.data.segment.validate(self.model.flow.squeeze_factor)?;
        if !(self.data.target_peak > 0.0 && self.data.target_peak <= 1.0) {
            return Err(Error::Config(format!("target_peak {} outside (0, 1]", self.data.target_peak)));
        }
        if !(self.eval.temperature >= 0.0) || !(self.eval.bin_width > 0.0) {
            return Err(Error::Config("eval temperature must be >= 0 and bin_width > 0".into()));
        }
        if let Some(s) = stage {
            self.train.validate(s)?;
        }
        Ok(())
    }

    /// Small configuration that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        let flow = FlowConfig {
            n_blocks: 4,
            squeeze_factor: 8,
            subnet_layers: 4,
            subnet_channels: 32,
            cond_channels: 32,
            early_output_every: 2,
            early_output_channels: 2,
            subnet_kernel: 3,
        };
        let cond = CondNetConfig { n_layers: 4, channel_growth: 8, cond_channels: 32, ..Default::default() };
        let disc = DiscConfig { width_divisor: 16, ..Default::default() };
        let train = TrainConfig {
            batch_size: 4,
            nf_max_epochs: 100,
            gan_epochs: 50,
            g_lr: 1e-3,
            d_lr: 1e-3,
            lr_decay_gan: 0.98,
            ..Default::default()
        };
        Self {
            model: ModelConfig { flow, cond, disc },
            train,
            data: DataConfig { segment: SegmentSpec { segment_samples: 2048, hop: 2048 }, ..Default::default() },
            eval: EvalConfig::default(),
        }
    }
}
