//! Multi-period and multi-scale waveform critics (HiFi-GAN style).
//!
//! Period critics fold the waveform into `[L/p, p]` and convolve along time
//! only (kernel `(k, 1)`), which is computed here as a 1-D convolution over
//! the `p` columns stacked into the batch. Scale critics run strided grouped
//! 1-D convolutions on 2x mean-pooled copies of the waveform.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{avg_pool2, leaky_relu, reflect_pad_right};
use crate::nn::{Conv1d, ConvSpec, Norm, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscConfig {
    pub periods: Vec<usize>,
    pub scales: usize,
    /// Divides the reference critic channel widths.
    pub width_divisor: usize,
    pub leaky_slope: f64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            periods: vec![2, 3, 5, 7, 11],
            scales: 3,
            width_divisor: 4,
            leaky_slope: 0.1,
        }
    }
}

impl DiscConfig {
    pub fn ensemble_size(&self) -> usize {
        self.periods.len() + self.scales
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_divisor == 0 || self.width_divisor > 128 {
            return Err(Error::Config(format!("width_divisor {} out of range", self.width_divisor)));
        }
        if self.periods.iter().any(|&p| p < 1) {
            return Err(Error::Config("periods must be >= 1".into()));
        }
        if self.ensemble_size() == 0 {
            return Err(Error::Config("empty discriminator ensemble".into()));
        }
        Ok(())
    }

    fn width(&self, c: usize) -> usize {
        (c / self.width_divisor).max(1)
    }
}

/// Patch scores plus every intermediate activation (for feature matching).
#[derive(Debug, Clone)]
pub struct DiscOutput {
    pub scores: Tensor,
    pub features: Vec<Tensor>,
}

struct ConvStack {
    convs: Vec<Conv1d>,
    post: Conv1d,
    slope: f64,
}

impl ConvStack {
    fn forward(&self, mut x: Tensor) -> Result<DiscOutput> {
        let mut features = Vec::with_capacity(self.convs.len() + 1);
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x)?, self.slope)?;
            features.push(x.clone());
        }
        let scores = self.post.forward(&x)?;
        features.push(scores.clone());
        Ok(DiscOutput { scores: scores.flatten_from(1)?, features })
    }

    fn power_iteration(&self) -> Result<()> {
        for c in self.convs.iter().chain(std::iter::once(&self.post)) {
            c.power_iteration()?;
        }
        Ok(())
    }
}

fn largest_common_groups(limit: usize, a: usize, b: usize) -> usize {
    (1..=limit).rev().find(|g| a % g == 0 && b % g == 0).unwrap_or(1)
}

/// Folds `[B, N]` into `[B, 1, N'/p, p]` after reflect-padding to a multiple of `p`.
pub fn fold_period(audio: &Tensor, period: usize) -> Result<Tensor> {
    let (b, n) = audio.dims2()?;
    let pad = (period - n % period) % period;
    let x = reflect_pad_right(audio, pad)?;
    let rows = (n + pad) / period;
    Ok(x.reshape((b, 1, rows, period))?)
}

pub struct PeriodDiscriminator {
    period: usize,
    stack: ConvStack,
}

impl PeriodDiscriminator {
    fn new(store: &mut ParamStore, cfg: &DiscConfig, period: usize) -> Result<Self> {
        let name = format!("mpd{period}");
        let widths: Vec<usize> = [32, 128, 512, 1024].iter().map(|&c| cfg.width(c)).collect();
        let mut convs = Vec::new();
        let mut prev = 1;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(Conv1d::new(
                store,
                &format!("{name}.conv{i}"),
                ConvSpec::new(prev, w, 5).stride(3).padding(2).norm(Norm::Weight),
            )?);
            prev = w;
        }
        let last = cfg.width(1024);
        convs.push(Conv1d::new(
            store,
            &format!("{name}.conv4"),
            ConvSpec::new(prev, last, 5).padding(2).norm(Norm::Weight),
        )?);
        let post = Conv1d::new(store, &format!("{name}.post"), ConvSpec::new(last, 1, 3).norm(Norm::Weight))?;
        Ok(Self { period, stack: ConvStack { convs, post, slope: cfg.leaky_slope } })
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn forward(&self, audio: &Tensor) -> Result<DiscOutput> {
        let folded = fold_period(audio, self.period)?;
        let (b, _, rows, p) = folded.dims4()?;
        // [B, 1, rows, p] -> [B*p, 1, rows]: one column per batch row.
        let cols = folded
            .squeeze(1)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * p, 1, rows))?;
        self.stack.forward(cols)
    }
}

pub struct ScaleDiscriminator {
    scale: usize,
    stack: ConvStack,
}

impl ScaleDiscriminator {
    fn new(store: &mut ParamStore, cfg: &DiscConfig, scale: usize) -> Result<Self> {
        let name = format!("msd{scale}");
        let norm = if scale == 0 { Norm::Spectral } else { Norm::Weight };
        // (out, kernel, stride, groups) of the reference critic.
        let layout = [
            (128, 15, 1, 1),
            (128, 41, 2, 4),
            (256, 41, 2, 16),
            (512, 41, 4, 16),
            (1024, 41, 4, 16),
            (1024, 41, 1, 16),
            (1024, 5, 1, 1),
        ];
        let mut convs = Vec::new();
        let mut prev = 1;
        for (i, &(out, k, stride, groups)) in layout.iter().enumerate() {
            let out = cfg.width(out);
            let g = largest_common_groups(groups, prev, out);
            convs.push(Conv1d::new(
                store,
                &format!("{name}.conv{i}"),
                ConvSpec::new(prev, out, k).stride(stride).groups(g).norm(norm),
            )?);
            prev = out;
        }
        let post = Conv1d::new(store, &format!("{name}.post"), ConvSpec::new(prev, 1, 3).norm(norm))?;
        Ok(Self { scale, stack: ConvStack { convs, post, slope: cfg.leaky_slope } })
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    /// Input after `scale` rounds of 2x mean pooling, `[B, 1, N / 2^scale]`.
    pub fn pooled_input(&self, audio: &Tensor) -> Result<Tensor> {
        let mut x = audio.unsqueeze(1)?;
        for _ in 0..self.scale {
            x = avg_pool2(&x)?;
        }
        Ok(x)
    }

    pub fn forward(&self, audio: &Tensor) -> Result<DiscOutput> {
        self.stack.forward(self.pooled_input(audio)?)
    }
}

/// The full critic ensemble with its own parameter store.
pub struct Discriminators {
    cfg: DiscConfig,
    store: ParamStore,
    periods: Vec<PeriodDiscriminator>,
    scales: Vec<ScaleDiscriminator>,
}

impl Discriminators {
    pub fn new(cfg: &DiscConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let periods = cfg
            .periods
            .iter()
            .map(|&p| PeriodDiscriminator::new(&mut store, cfg, p))
            .collect::<Result<Vec<_>>>()?;
        let scales = (0..cfg.scales)
            .map(|s| ScaleDiscriminator::new(&mut store, cfg, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg: cfg.clone(), store, periods, scales })
    }

    pub fn config(&self) -> &DiscConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn period_discriminators(&self) -> &[PeriodDiscriminator] {
        &self.periods
    }

    pub fn scale_discriminators(&self) -> &[ScaleDiscriminator] {
        &self.scales
    }

    /// Outputs ordered as period critics (ascending period) then scale critics.
    pub fn forward(&self, audio: &Tensor) -> Result<Vec<DiscOutput>> {
        let mut out = Vec::with_capacity(self.cfg.ensemble_size());
        let mut periods: Vec<&PeriodDiscriminator> = self.periods.iter().collect();
        periods.sort_by_key(|d| d.period);
        for d in periods {
            out.push(d.forward(audio)?);
        }
        for d in &self.scales {
            out.push(d.forward(audio)?);
        }
        Ok(out)
    }

    /// Advances spectral-norm power iteration; call once before each critic update.
    pub fn refresh_spectral_norm(&self) -> Result<()> {
        for d in &self.scales {
            d.stack.power_iteration()?;
        }
        Ok(())
    }
}
