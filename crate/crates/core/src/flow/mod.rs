//! The invertible flow: squeeze, then `n_blocks` x (1x1 invertible
//! convolution -> affine coupling), with channels routed to the latent early
//! at regular depths.

mod coupling;
mod invconv;
mod squeeze;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use coupling::{Coupling, WaveNet, LOG_SCALE_CLAMP};
pub use invconv::{invconv, Direction, InvConv, SINGULAR_DET};
pub use squeeze::{padding_for, squeeze, unsqueeze};

use crate::conditioning::CondFeatures;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub n_blocks: usize,
    pub squeeze_factor: usize,
    pub subnet_layers: usize,
    pub subnet_channels: usize,
    pub cond_channels: usize,
    /// Blocks between early outputs; 0 disables early outputs.
    pub early_output_every: usize,
    pub early_output_channels: usize,
    pub subnet_kernel: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_blocks: 20,
            squeeze_factor: 12,
            subnet_layers: 8,
            subnet_channels: 128,
            cond_channels: 256,
            early_output_every: 4,
            early_output_channels: 2,
            subnet_kernel: 3,
        }
    }
}

impl FlowConfig {
    fn splits_before(&self, block: usize) -> bool {
        self.early_output_every > 0
            && self.early_output_channels > 0
            && block > 0
            && block % self.early_output_every == 0
    }

    /// Indices of the blocks in front of which early-output channels leave the flow.
    pub fn early_output_blocks(&self) -> Vec<usize> {
        (0..self.n_blocks).filter(|&k| self.splits_before(k)).collect()
    }

    /// Active channel count seen by each block.
    pub fn block_channels(&self) -> Vec<usize> {
        let mut c = self.squeeze_factor;
        (0..self.n_blocks)
            .map(|k| {
                if self.splits_before(k) {
                    c = c.saturating_sub(self.early_output_channels);
                }
                c
            })
            .collect()
    }

    /// Channel counts of the latent groups in emission order (early outputs, then final).
    pub fn latent_groups(&self) -> Vec<usize> {
        let mut groups: Vec<usize> = self
            .early_output_blocks()
            .iter()
            .map(|_| self.early_output_channels)
            .collect();
        groups.push(*self.block_channels().last().unwrap_or(&self.squeeze_factor));
        groups
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_blocks == 0 {
            return bad("n_blocks must be at least 1".into());
        }
        if self.squeeze_factor < 2 {
            return bad("squeeze_factor must be at least 2".into());
        }
        if self.subnet_kernel % 2 == 0 {
            return bad(format!("subnet_kernel must be odd, got {}", self.subnet_kernel));
        }
        if self.subnet_layers == 0 || self.subnet_channels == 0 || self.cond_channels == 0 {
            return bad("subnet_layers, subnet_channels and cond_channels must be positive".into());
        }
        let removed = self.early_output_blocks().len() * self.early_output_channels;
        if removed >= self.squeeze_factor {
            return bad(format!(
                "early outputs remove {removed} of {} channels; nothing left for the final blocks",
                self.squeeze_factor
            ));
        }
        for (k, c) in self.block_channels().into_iter().enumerate() {
            if c < 2 || c % 2 != 0 {
                return bad(format!("block {k} would see {c} channels; couplings need an even count >= 2"));
            }
        }
        debug_assert_eq!(self.latent_groups().iter().sum::<usize>(), self.squeeze_factor);
        Ok(())
    }
}

/// Latent `z: [B, s, T]` (early groups followed by the final channels) and the
/// per-item log-determinant of the Jacobian, `[B]` in f64.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub z: Tensor,
    pub logdet: Tensor,
}

pub struct FlowBlock {
    pub invconv: InvConv,
    pub coupling: Coupling,
}

pub struct Flow {
    cfg: FlowConfig,
    blocks: Vec<FlowBlock>,
}

impl Flow {
    pub fn new(store: &mut ParamStore, cfg: &FlowConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = cfg
            .block_channels()
            .into_iter()
            .enumerate()
            .map(|(k, c)| {
                Ok(FlowBlock {
                    invconv: InvConv::new(store, k, c)?,
                    coupling: Coupling::new(store, k, c, cfg)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg: cfg.clone(), blocks })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[FlowBlock] {
        &self.blocks
    }

    fn check_cond(&self, cond: &CondFeatures, batch: usize, frames: usize) -> Result<()> {
        if cond.per_block.len() != self.blocks.len() {
            return Err(Error::Config(format!(
                "conditioning stack has {} maps for {} flow blocks",
                cond.per_block.len(),
                self.blocks.len()
            )));
        }
        for (k, m) in cond.per_block.iter().enumerate() {
            let (b, c, t) = m.dims3()?;
            if b != batch || c != self.cfg.cond_channels || t != frames {
                return Err(Error::Shape(format!(
                    "conditioning map {k} is [{b}, {c}, {t}], expected [{batch}, {}, {frames}]",
                    self.cfg.cond_channels
                )));
            }
        }
        Ok(())
    }

    /// `x: [B, N]` -> latent and log-determinant.
    pub fn forward(&self, x: &Tensor, cond: &CondFeatures) -> Result<LatentState> {
        let mut h = squeeze(x, self.cfg.squeeze_factor)?;
        let (b, _, t) = h.dims3()?;
        self.check_cond(cond, b, t)?;
        let mut outputs = Vec::new();
        let mut logdet = Tensor::zeros(b, DType::F64, x.device())?;
        for (k, block) in self.blocks.iter().enumerate() {
            if self.cfg.splits_before(k) {
                let e = self.cfg.early_output_channels;
                let c = h.dim(1)?;
                outputs.push(h.narrow(1, 0, e)?);
                h = h.narrow(1, e, c - e)?;
            }
            let (mixed, d) = block.invconv.forward(&h)?;
            logdet = logdet.broadcast_add(&d)?;
            let (coupled, d) = block.coupling.forward(&mixed, &cond.per_block[k])?;
            logdet = (logdet + d)?;
            h = coupled;
        }
        outputs.push(h);
        Ok(LatentState { z: Tensor::cat(&outputs, 1)?, logdet })
    }

    /// Latent `z: [B, s, T]` -> audio `[B, N]`.
    pub fn inverse(&self, z: &Tensor, cond: &CondFeatures) -> Result<Tensor> {
        let (b, s, t) = z.dims3()?;
        if s != self.cfg.squeeze_factor {
            return Err(Error::Shape(format!(
                "latent has {s} channels, flow expects {}",
                self.cfg.squeeze_factor
            )));
        }
        self.check_cond(cond, b, t)?;
        let groups = self.cfg.latent_groups();
        let mut offset = 0;
        let mut parts = Vec::with_capacity(groups.len());
        for g in &groups {
            parts.push(z.narrow(1, offset, *g)?);
            offset += g;
        }
        let mut h = parts.pop().expect("final latent group");
        for (k, block) in self.blocks.iter().enumerate().rev() {
            let (uncoupled, _) = block.coupling.inverse(&h, &cond.per_block[k])?;
            let (unmixed, _) = block.invconv.inverse(&uncoupled)?;
            h = unmixed;
            if self.cfg.splits_before(k) {
                let early = parts.pop().expect("early latent group");
                h = Tensor::cat(&[&early, &h], 1)?;
            }
        }
        unsqueeze(&h)
    }
}
