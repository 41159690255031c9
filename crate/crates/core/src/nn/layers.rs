use candle_core::{DType, Tensor, Var};

use super::ops;
use super::params::{value, Init, ParamStore};
use crate::error::Result;

/// Weight reparameterisation applied to a convolution kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    None,
    /// `w = g * v / ||v||` per output channel.
    Weight,
    /// `w = v / sigma(v)`, sigma tracked by power iteration.
    Spectral,
}

#[derive(Debug, Clone)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
    pub norm: Norm,
    pub init: Option<Init>,
}

impl ConvSpec {
    /// Stride-1, length-preserving ("same") convolution with bias.
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
            groups: 1,
            bias: true,
            norm: Norm::None,
            init: None,
        }
    }

    pub fn pointwise(in_ch: usize, out_ch: usize) -> Self {
        Self::new(in_ch, out_ch, 1)
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    /// Sets the dilation and re-derives "same" padding.
    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = dilation * (self.kernel - 1) / 2;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn norm(mut self, norm: Norm) -> Self {
        self.norm = norm;
        self
    }

    pub fn init(mut self, init: Init) -> Self {
        self.init = Some(init);
        self
    }

    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        Self::new(channels, channels, kernel).groups(channels).no_bias()
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    fn fan_in(&self) -> usize {
        self.in_ch / self.groups * self.kernel
    }
}

pub struct Conv1d {
    spec: ConvSpec,
    v: Var,
    gain: Option<Var>,
    sn_u: Option<Var>,
    sn_v: Option<Var>,
    bias: Option<Var>,
}

const POWER_ITERATION_EPS: f64 = 1e-12;

impl Conv1d {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec) -> Result<Self> {
        let shape = [spec.out_ch, spec.in_ch / spec.groups, spec.kernel];
        let init = spec
            .init
            .clone()
            .unwrap_or(Init::Uniform(1.0 / (spec.fan_in() as f64).sqrt()));
        let v = store.param(format!("{name}.weight"), &shape, init)?;
        let mut gain = None;
        let mut sn_u = None;
        let mut sn_v = None;
        match spec.norm {
            Norm::None => {}
            Norm::Weight => {
                let norms = v.as_tensor().sqr()?.sum_keepdim((1, 2))?.sqrt()?;
                gain = Some(store.param_from(format!("{name}.gain"), &norms)?);
            }
            Norm::Spectral => {
                let rest = shape[1] * shape[2];
                sn_u = Some(store.buffer(format!("{name}.sn_u"), &[spec.out_ch], Init::Normal(1.0))?);
                sn_v = Some(store.buffer(format!("{name}.sn_v"), &[rest], Init::Normal(1.0))?);
            }
        }
        let bias = if spec.bias {
            Some(store.param(format!("{name}.bias"), &[spec.out_ch], Init::Zeros)?)
        } else {
            None
        };
        let conv = Self { spec, v, gain, sn_u, sn_v, bias };
        if conv.spec.norm == Norm::Spectral {
            for _ in 0..8 {
                conv.power_iteration()?;
            }
        }
        Ok(conv)
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    /// Effective kernel after reparameterisation.
    pub fn weight(&self) -> Result<Tensor> {
        let v = value(&self.v);
        match self.spec.norm {
            Norm::None => Ok(v),
            Norm::Weight => {
                let norm = v.sqr()?.sum_keepdim((1, 2))?.sqrt()?;
                let g = self.gain.as_ref().expect("weight norm gain");
                Ok(v.broadcast_div(&norm)?.broadcast_mul(&value(g))?)
            }
            Norm::Spectral => {
                let (u, vv) = (self.sn_u.as_ref().unwrap(), self.sn_v.as_ref().unwrap());
                let wm = v.reshape((self.spec.out_ch, ()))?;
                let sigma = value(u)
                    .unsqueeze(0)?
                    .matmul(&wm)?
                    .matmul(&value(vv).unsqueeze(1)?)?
                    .reshape(())?;
                Ok(v.broadcast_div(&sigma)?)
            }
        }
    }

    /// One power-iteration refresh of the spectral-norm vectors. No-op for
    /// other norms. Kept out of `forward` so forward passes stay pure.
    pub fn power_iteration(&self) -> Result<()> {
        let (Some(u), Some(vv)) = (&self.sn_u, &self.sn_v) else {
            return Ok(());
        };
        let wm = self.v.as_tensor().detach().reshape((self.spec.out_ch, ()))?;
        let normalize = |t: Tensor| -> Result<Tensor> {
            let n = t.sqr()?.sum_all()?.sqrt()?;
            Ok(t.broadcast_div(&(n + POWER_ITERATION_EPS)?)?)
        };
        let new_v = normalize(wm.t()?.matmul(&u.as_tensor().unsqueeze(1)?)?.squeeze(1)?)?;
        let new_u = normalize(wm.matmul(&new_v.unsqueeze(1)?)?.squeeze(1)?)?;
        vv.set(&new_v)?;
        u.set(&new_u)?;
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = &self.spec;
        let w = self.weight()?;
        let y = ops::conv1d(x, &w, s.stride, s.padding, s.dilation, s.groups)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&value(b).reshape((1, s.out_ch, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Standard-normal tensor from a seeded stream, in the requested dtype.
pub fn randn(rng: &mut impl rand::Rng, shape: &[usize], std: f64, dtype: DType) -> Result<Tensor> {
    use rand_distr::StandardNormal;
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}
