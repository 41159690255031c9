//! Conditioning path from the noisy signal into the coupling subnets.
//!
//! Two topologies are available. `CondNet` runs a stride-1 convolutional
//! encoder over the squeezed noisy signal; layer `i` widens to
//! `channel_growth * i` channels and a per-layer 1x1 "cond block" maps it to
//! `cond_channels` for coupling layer `i`, so deeper couplings receive
//! features built on those of shallower ones. `Baseline` gives each flow block
//! its own single depthwise-separable convolution with no cross-block path.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::squeeze;
use crate::nn::ops::{leaky_relu, sigmoid};
use crate::nn::{Conv1d, ConvSpec, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    CondNet,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CondNetConfig {
    pub mode: CondMode,
    pub n_layers: usize,
    pub channel_growth: usize,
    pub kernel_size: usize,
    pub cond_channels: usize,
    pub leaky_slope: f64,
}

impl Default for CondNetConfig {
    fn default() -> Self {
        Self {
            mode: CondMode::CondNet,
            n_layers: 20,
            channel_growth: 24,
            kernel_size: 15,
            cond_channels: 256,
            leaky_slope: 0.1,
        }
    }
}

impl CondNetConfig {
    pub fn validate(&self, n_blocks: usize, flow_cond_channels: usize) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("cond kernel_size must be odd, got {}", self.kernel_size)));
        }
        if self.cond_channels != flow_cond_channels {
            return Err(Error::Config(format!(
                "conditioning emits {} channels but coupling subnets expect {flow_cond_channels}",
                self.cond_channels
            )));
        }
        if self.mode == CondMode::CondNet {
            if self.n_layers == 0 || self.channel_growth == 0 {
                return Err(Error::Config("condNet needs n_layers >= 1 and channel_growth >= 1".into()));
            }
            if self.n_layers != n_blocks {
                return Err(Error::Config(format!(
                    "condNet has {} encoder layers but the flow has {n_blocks} blocks",
                    self.n_layers
                )));
            }
        }
        Ok(())
    }
}

/// One conditioning map `[B, cond_channels, T]` per flow block.
#[derive(Debug, Clone)]
pub struct CondFeatures {
    pub per_block: Vec<Tensor>,
}

impl CondFeatures {
    pub fn len(&self) -> usize {
        self.per_block.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_block.is_empty()
    }
}

/// `tanh(a_h + a_c) * sigmoid(b_h + b_c)` where `(a, b)` are the channel halves.
pub fn gated_injection(hidden: &Tensor, cond: &Tensor) -> Result<Tensor> {
    if hidden.dims() != cond.dims() {
        return Err(Error::Config(format!(
            "gated injection: hidden {:?} vs conditioning {:?}",
            hidden.dims(),
            cond.dims()
        )));
    }
    let c2 = hidden.dim(1)?;
    if c2 % 2 != 0 {
        return Err(Error::Config(format!("gated injection needs an even channel count, got {c2}")));
    }
    let z = (hidden + cond)?;
    let c = c2 / 2;
    let a = z.narrow(1, 0, c)?;
    let b = z.narrow(1, c, c)?;
    Ok((a.tanh()? * sigmoid(&b)?)?)
}

pub struct CondNet {
    encoder: Vec<Conv1d>,
    cond_blocks: Vec<Conv1d>,
    slope: f64,
}

impl CondNet {
    fn new(store: &mut ParamStore, cfg: &CondNetConfig, in_ch: usize) -> Result<Self> {
        let mut encoder = Vec::with_capacity(cfg.n_layers);
        let mut cond_blocks = Vec::with_capacity(cfg.n_layers);
        let mut prev = in_ch;
        for i in 1..=cfg.n_layers {
            let width = cfg.channel_growth * i;
            encoder.push(Conv1d::new(
                store,
                &format!("condnet.encoder{i}"),
                ConvSpec::new(prev, width, cfg.kernel_size),
            )?);
            cond_blocks.push(Conv1d::new(
                store,
                &format!("condnet.cond_block{i}"),
                ConvSpec::pointwise(width, cfg.cond_channels),
            )?);
            prev = width;
        }
        Ok(Self { encoder, cond_blocks, slope: cfg.leaky_slope })
    }

    /// Runs the encoder on `[B, s, T]` and returns every layer's activation.
    pub fn encode(&self, y_squeezed: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = y_squeezed.clone();
        let mut outs = Vec::with_capacity(self.encoder.len());
        for conv in &self.encoder {
            h = leaky_relu(&conv.forward(&h)?, self.slope)?;
            outs.push(h.clone());
        }
        Ok(outs)
    }

    /// Maps encoder layer `layer` (0-based) to the coupling conditioning width.
    pub fn cond_block(&self, layer: usize, feature: &Tensor) -> Result<Tensor> {
        let block = self
            .cond_blocks
            .get(layer)
            .ok_or_else(|| Error::Config(format!("no cond block for encoder layer {layer}")))?;
        block.forward(feature)
    }
}

pub struct BaselineCond {
    blocks: Vec<(Conv1d, Conv1d)>,
}

impl BaselineCond {
    fn new(store: &mut ParamStore, cfg: &CondNetConfig, in_ch: usize, n_blocks: usize) -> Result<Self> {
        let blocks = (0..n_blocks)
            .map(|k| {
                Ok((
                    Conv1d::new(
                        store,
                        &format!("baseline.block{k}.depthwise"),
                        ConvSpec::depthwise(in_ch, cfg.kernel_size),
                    )?,
                    Conv1d::new(
                        store,
                        &format!("baseline.block{k}.pointwise"),
                        ConvSpec::pointwise(in_ch, cfg.cond_channels),
                    )?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }
}

pub enum Conditioner {
    CondNet(CondNet),
    Baseline(BaselineCond),
}

impl Conditioner {
    pub fn new(store: &mut ParamStore, cfg: &CondNetConfig, squeeze_factor: usize, n_blocks: usize) -> Result<Self> {
        Ok(match cfg.mode {
            CondMode::CondNet => Conditioner::CondNet(CondNet::new(store, cfg, squeeze_factor)?),
            CondMode::Baseline => Conditioner::Baseline(BaselineCond::new(store, cfg, squeeze_factor, n_blocks)?),
        })
    }

    /// Builds the per-block conditioning stack for noisy audio `y: [B, N]`.
    pub fn build(&self, y: &Tensor, squeeze_factor: usize) -> Result<CondFeatures> {
        let ys = squeeze(y, squeeze_factor)?;
        let per_block = match self {
            Conditioner::CondNet(net) => net
                .encode(&ys)?
                .iter()
                .enumerate()
                .map(|(i, f)| net.cond_block(i, f))
                .collect::<Result<Vec<_>>>()?,
            Conditioner::Baseline(base) => base
                .blocks
                .iter()
                .map(|(dw, pw)| pw.forward(&dw.forward(&ys)?))
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(CondFeatures { per_block })
    }
}
