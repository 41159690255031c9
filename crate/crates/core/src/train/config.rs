use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Nf,
    Gan,
    Hybrid,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Nf => "nf",
            Stage::Gan => "gan",
            Stage::Hybrid => "hybrid",
        })
    }
}

/// How the hybrid stage applies the likelihood term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HybridMode {
    /// Separate likelihood and adversarial generator updates per batch.
    TwoStep,
    /// One generator update on `L_G + lambda * L_nll`.
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub nf_lr: f64,
    pub nf_betas: (f64, f64),
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub nf_max_epochs: usize,
    pub gan_epochs: usize,
    pub g_lr: f64,
    pub d_lr: f64,
    pub gan_betas: (f64, f64),
    pub lr_decay_gan: f64,
    pub lambda: f64,
    pub hybrid_mode: HybridMode,
    pub grad_clip: f64,
    /// Standard deviation of the latent draw used for generation during training.
    pub latent_temperature: f64,
    /// Critic loss below which an epoch counts as collapsed.
    pub collapse_threshold: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 16,
            nf_lr: 1e-3,
            nf_betas: (0.9, 0.999),
            plateau_factor: 0.8,
            plateau_patience: 10,
            early_stop_patience: 40,
            nf_max_epochs: 300,
            gan_epochs: 200,
            g_lr: 5e-5,
            d_lr: 2e-4,
            gan_betas: (0.5, 0.9),
            lr_decay_gan: 0.8,
            lambda: 0.3,
            hybrid_mode: HybridMode::TwoStep,
            grad_clip: 10.0,
            latent_temperature: 1.0,
            collapse_threshold: 1e-4,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, stage: Stage) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.grad_clip > 0.0) || !(self.latent_temperature >= 0.0) {
            return bad("grad_clip must be positive and latent_temperature non-negative");
        }
        let betas_ok = |(a, b): (f64, f64)| (0.0..1.0).contains(&a) && (0.0..1.0).contains(&b);
        match stage {
            Stage::Nf => {
                if !(self.nf_lr > 0.0) || !betas_ok(self.nf_betas) {
                    return bad("nf_lr must be positive and nf_betas in [0, 1)");
                }
                if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
                    return bad("plateau_factor must lie in (0, 1)");
                }
                if self.nf_max_epochs == 0 || self.early_stop_patience == 0 {
                    return bad("nf_max_epochs and early_stop_patience must be positive");
                }
            }
            Stage::Gan | Stage::Hybrid => {
                if !(self.g_lr > 0.0 && self.d_lr > 0.0) || !betas_ok(self.gan_betas) {
                    return bad("g_lr and d_lr must be positive and gan_betas in [0, 1)");
                }
                if !(self.lr_decay_gan > 0.0 && self.lr_decay_gan <= 1.0) {
                    return bad("lr_decay_gan must lie in (0, 1]");
                }
                if self.gan_epochs == 0 {
                    return bad("gan_epochs must be positive");
                }
                if !(self.lambda >= 0.0) {
                    return bad("lambda must be non-negative");
                }
                self.loss.mrstft.validate()?;
            }
        }
        Ok(())
    }
}
