use candle_core::{DType, Tensor};

use super::invconv::Direction;
use super::FlowConfig;
use crate::conditioning::gated_injection;
use crate::error::{Error, Result};
use crate::nn::ops::{ensure_finite, scalar};
use crate::nn::{Conv1d, ConvSpec, Init, ParamStore};

/// Bound applied to the predicted log-scale before exponentiation.
pub const LOG_SCALE_CLAMP: f64 = 7.0;

struct WaveNetLayer {
    depthwise: Conv1d,
    pointwise: Conv1d,
    cond: Conv1d,
    res_skip: Conv1d,
    last: bool,
}

/// WaveNet-style coupling subnet: dilated depthwise-separable convolutions
/// with gated conditioning, residual and skip paths. Dilations double per
/// layer (1, 2, 4, ...).
pub struct WaveNet {
    start: Conv1d,
    layers: Vec<WaveNetLayer>,
    end: Conv1d,
    hidden: usize,
}

impl WaveNet {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, cfg: &FlowConfig) -> Result<Self> {
        let hidden = cfg.subnet_channels;
        let start = Conv1d::new(store, &format!("{name}.start"), ConvSpec::pointwise(in_ch, hidden))?;
        let mut layers = Vec::with_capacity(cfg.subnet_layers);
        for i in 0..cfg.subnet_layers {
            let last = i + 1 == cfg.subnet_layers;
            let p = format!("{name}.layer{i}");
            let dilation = 1usize << i;
            layers.push(WaveNetLayer {
                depthwise: Conv1d::new(
                    store,
                    &format!("{p}.depthwise"),
                    ConvSpec::depthwise(hidden, cfg.subnet_kernel).dilation(dilation),
                )?,
                pointwise: Conv1d::new(store, &format!("{p}.pointwise"), ConvSpec::pointwise(hidden, 2 * hidden))?,
                cond: Conv1d::new(store, &format!("{p}.cond"), ConvSpec::pointwise(cfg.cond_channels, 2 * hidden))?,
                res_skip: Conv1d::new(
                    store,
                    &format!("{p}.res_skip"),
                    ConvSpec::pointwise(hidden, if last { hidden } else { 2 * hidden }),
                )?,
                last,
            });
        }
        // Zero-initialised so every coupling starts as the identity map.
        let end = Conv1d::new(store, &format!("{name}.end"), ConvSpec::pointwise(hidden, out_ch).init(Init::Zeros))?;
        Ok(Self { start, layers, end, hidden })
    }

    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let mut audio = self.start.forward(x)?;
        let mut skip: Option<Tensor> = None;
        for layer in &self.layers {
            let hidden = layer.pointwise.forward(&layer.depthwise.forward(&audio)?)?;
            let c = layer.cond.forward(cond)?;
            let acts = gated_injection(&hidden, &c)?;
            let rs = layer.res_skip.forward(&acts)?;
            let skip_part = if layer.last {
                rs
            } else {
                audio = (audio + rs.narrow(1, 0, self.hidden)?)?;
                rs.narrow(1, self.hidden, self.hidden)?
            };
            skip = Some(match skip {
                Some(s) => (s + skip_part)?,
                None => skip_part,
            });
        }
        let skip = match skip {
            Some(s) => s,
            None => audio,
        };
        self.end.forward(&skip)
    }
}

/// Affine coupling: the first half of the channels conditions an affine
/// transform of the second half.
pub struct Coupling {
    block: usize,
    channels: usize,
    subnet: WaveNet,
}

impl Coupling {
    pub fn new(store: &mut ParamStore, block: usize, channels: usize, cfg: &FlowConfig) -> Result<Self> {
        if channels % 2 != 0 || channels < 2 {
            return Err(Error::Config(format!(
                "block {block}: coupling needs an even channel count, got {channels}"
            )));
        }
        let half = channels / 2;
        let subnet = WaveNet::new(store, &format!("block{block}.coupling"), half, channels, cfg)?;
        Ok(Self { block, channels, subnet })
    }

    /// Predicted `(log_s, t)` for the first half `h1`.
    fn affine_params(&self, h1: &Tensor, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        let half = self.channels / 2;
        let out = self.subnet.forward(h1, cond)?;
        let log_s = out.narrow(1, 0, half)?.clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)?;
        let t = out.narrow(1, half, half)?;
        Ok((log_s, t))
    }

    pub fn apply(&self, h: &Tensor, cond: &Tensor, direction: Direction) -> Result<(Tensor, Tensor)> {
        let (_, c, t_len) = h.dims3()?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "block {}: coupling built for {} channels, got {c}",
                self.block, self.channels
            )));
        }
        if cond.dim(2)? != t_len {
            return Err(Error::Shape(format!(
                "block {}: conditioning length {} != signal length {t_len}",
                self.block,
                cond.dim(2)?
            )));
        }
        let half = c / 2;
        let h1 = h.narrow(1, 0, half)?;
        let h2 = h.narrow(1, half, half)?;
        let (log_s, t) = self.affine_params(&h1, cond)?;
        let logdet = log_s.to_dtype(DType::F64)?.sum((1, 2))?;
        let block = self.block;
        ensure_finite(scalar(&logdet.sum_all()?)?, || format!("block {block} coupling log-scale"))?;
        ensure_finite(scalar(&t.sum_all()?)?, || format!("block {block} coupling translation"))?;
        let (h2, logdet) = match direction {
            Direction::Forward => (((h2 * log_s.exp()?)? + t)?, logdet),
            Direction::Inverse => (((h2 - t)? * log_s.neg()?.exp()?)?, logdet.neg()?),
        };
        Ok((Tensor::cat(&[&h1, &h2], 1)?, logdet))
    }

    pub fn forward(&self, h: &Tensor, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        self.apply(h, cond, Direction::Forward)
    }

    pub fn inverse(&self, h: &Tensor, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        self.apply(h, cond, Direction::Inverse)
    }
}
