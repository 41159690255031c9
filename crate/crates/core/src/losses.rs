//! Training objectives. Every scalar loss is returned as an f64 tensor so the
//! pieces can be summed and differentiated regardless of model precision.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::discriminators::DiscOutput;
use crate::error::{Error, Result};
use crate::nn::ops::{ensure_finite, scalar};
pub use crate::stft::{padded_hann, Stft};

/// Log-magnitude floor.
pub const MAG_EPS: f64 = 1e-7;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

fn per_item_nll(z: &Tensor, logdet: &Tensor) -> Result<(Tensor, usize)> {
    let b = z.dim(0)?;
    let n = z.elem_count() / b.max(1);
    let sq = z.to_dtype(DType::F64)?.reshape((b, n))?.sqr()?.sum(1)?;
    let ld = logdet.to_dtype(DType::F64)?.reshape(b)?;
    let nll = (((sq * 0.5)? + n as f64 * HALF_LN_2PI)? - ld)?;
    Ok(((nll / n as f64)?, n))
}

/// `[½(‖z‖² + N ln 2π) − logdet] / N`, averaged over the batch.
pub fn nll_loss(z: &Tensor, logdet: &Tensor) -> Result<Tensor> {
    let (per, _) = per_item_nll(z, logdet)?;
    let loss = per.mean(0)?;
    ensure_finite(scalar(&loss)?, || "nll".to_string())?;
    Ok(loss)
}

pub fn nll_per_item(z: &Tensor, logdet: &Tensor) -> Result<Vec<f64>> {
    let (per, _) = per_item_nll(z, logdet)?;
    let v: Vec<f64> = per.to_vec1()?;
    for x in &v {
        ensure_finite(*x, || "nll".to_string())?;
    }
    Ok(v)
}

fn f64_mean(t: &Tensor) -> Result<Tensor> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.mean(0)?)
}

/// Least-squares critic loss `mean((real-1)^2) + mean(fake^2)`.
pub fn lsgan_d(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    Ok((f64_mean(&(real - 1.0)?.sqr()?)? + f64_mean(&fake.sqr()?)?)?)
}

/// Least-squares generator loss `mean((fake-1)^2)`.
pub fn lsgan_g(fake: &Tensor) -> Result<Tensor> {
    f64_mean(&(fake - 1.0)?.sqr()?)
}

pub fn lsgan_losses(real: &Tensor, fake: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((lsgan_d(real, fake)?, lsgan_g(fake)?))
}

/// Mean absolute feature difference, averaged over layers then critics.
pub fn feature_matching(real: &[DiscOutput], fake: &[DiscOutput]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Config(format!(
            "feature matching over {} real vs {} fake critic outputs",
            real.len(),
            fake.len()
        )));
    }
    let mut per_disc = Vec::with_capacity(real.len());
    for (k, (r, f)) in real.iter().zip(fake).enumerate() {
        if r.features.len() != f.features.len() || r.features.is_empty() {
            return Err(Error::Config(format!("critic {k}: feature lists differ in length")));
        }
        let mut acc: Option<Tensor> = None;
        for (a, b) in r.features.iter().zip(&f.features) {
            let d = f64_mean(&(a - b)?.abs()?)?;
            acc = Some(match acc {
                Some(s) => (s + d)?,
                None => d,
            });
        }
        per_disc.push((acc.expect("non-empty") / r.features.len() as f64)?);
    }
    Ok((Tensor::stack(&per_disc, 0)?.sum(0)? / per_disc.len() as f64)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MrStftConfig {
    /// `(fft_size, hop, window_length)` triples.
    pub resolutions: Vec<(usize, usize, usize)>,
}

impl Default for MrStftConfig {
    fn default() -> Self {
        Self { resolutions: vec![(1024, 120, 600), (2048, 240, 1200), (512, 50, 240)] }
    }
}

impl MrStftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolutions.is_empty() {
            return Err(Error::Config("mrstft needs at least one resolution".into()));
        }
        for &(n_fft, hop, win) in &self.resolutions {
            if win > n_fft || hop == 0 || hop >= win {
                return Err(Error::Config(format!("invalid stft resolution ({n_fft}, {hop}, {win})")));
            }
        }
        Ok(())
    }
}

/// Spectral convergence and log-magnitude L1 for one resolution.
pub fn stft_terms(stft: &Stft, reference: &Tensor, estimate: &Tensor) -> Result<(Tensor, Tensor)> {
    let p_ref = stft.power(reference)?;
    if scalar(&p_ref.to_dtype(DType::F64)?.sum_all()?)? <= 0.0 {
        return Err(Error::Degenerate("reference spectrum is silent".into()));
    }
    let m_ref = p_ref.maximum(MAG_EPS * MAG_EPS)?.sqrt()?.to_dtype(DType::F64)?;
    let m_est = stft.magnitude(estimate, MAG_EPS)?.to_dtype(DType::F64)?;
    let diff = (&m_ref - &m_est)?;
    let sc = (diff.sqr()?.sum_all()?.sqrt()? / m_ref.sqr()?.sum_all()?.sqrt()?)?;
    let logmag = (m_ref.log()? - m_est.log()?)?.abs()?.flatten_all()?.mean(0)?;
    Ok((sc, logmag))
}

pub struct MrStft {
    stfts: Vec<Stft>,
}

impl MrStft {
    pub fn new(cfg: &MrStftConfig) -> Result<Self> {
        cfg.validate()?;
        let stfts = cfg
            .resolutions
            .iter()
            .map(|&(n, h, w)| Stft::new(n, h, w))
            .collect();
        Ok(Self { stfts })
    }

    /// Mean over resolutions of spectral convergence plus log-magnitude L1.
    pub fn loss(&self, reference: &Tensor, estimate: &Tensor) -> Result<Tensor> {
        if reference.dims() != estimate.dims() {
            return Err(Error::Shape(format!(
                "mrstft: reference {:?} vs estimate {:?}",
                reference.dims(),
                estimate.dims()
            )));
        }
        let mut total: Option<Tensor> = None;
        for stft in &self.stfts {
            let (sc, lm) = stft_terms(stft, reference, estimate)?;
            let term = (sc + lm)?;
            total = Some(match total {
                Some(t) => (t + term)?,
                None => term,
            });
        }
        Ok((total.expect("validated non-empty") / self.stfts.len() as f64)?)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank `[n_mels, n_fft/2+1]` spanning 0 Hz to Nyquist.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64) -> Vec<f64> {
    let bins = n_fft / 2 + 1;
    let top = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
    let mut fb = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate / n_fft as f64;
            let v = if f >= lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[m * bins + k] = v;
        }
    }
    fb
}

/// L1 distance between log-mel spectrograms (n_fft 1024, hop 256, 80 bands).
pub struct MelLoss {
    stft: Stft,
    fb: Tensor,
}

impl MelLoss {
    pub fn new(dtype: DType) -> Result<Self> {
        let stft = Stft::new(1024, 256, 1024);
        let fb = Tensor::from_vec(mel_filterbank(80, 1024, 16000.0), (80, 513), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(Self { stft, fb })
    }

    pub fn loss(&self, reference: &Tensor, estimate: &Tensor) -> Result<Tensor> {
        let mel = |x: &Tensor| -> Result<Tensor> {
            let m = self.fb.broadcast_matmul(&self.stft.magnitude(x, MAG_EPS)?)?;
            Ok(m.maximum(1e-5)?.log()?)
        };
        f64_mean(&(mel(reference)? - mel(estimate)?)?.abs()?)
    }
}

/// Negative batch-mean SI-SDR in dB, differentiable.
pub fn neg_si_sdr_loss(reference: &Tensor, estimate: &Tensor) -> Result<Tensor> {
    let r = reference.to_dtype(DType::F64)?;
    let e = estimate.to_dtype(DType::F64)?;
    let rr = r.sqr()?.sum_keepdim(D::Minus1)?;
    let alpha = ((&e * &r)?.sum_keepdim(D::Minus1)? / rr)?;
    let target = r.broadcast_mul(&alpha)?;
    let resid = (&e - &target)?;
    let ratio = (target.sqr()?.sum(D::Minus1)? / (resid.sqr()?.sum(D::Minus1)? + 1e-12)?)?;
    let db = (ratio.log()? * (10.0 / std::f64::consts::LN_10))?;
    Ok(db.mean(0)?.neg()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionKind {
    Mrstft,
    Mel,
    SiSdr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub fm_weight: f64,
    pub rec_weight: f64,
    pub reconstruction: ReconstructionKind,
    pub mrstft: MrStftConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            fm_weight: 2.0,
            rec_weight: 1.0,
            reconstruction: ReconstructionKind::Mrstft,
            mrstft: MrStftConfig::default(),
        }
    }
}

pub enum Reconstruction {
    Mrstft(MrStft),
    Mel(MelLoss),
    SiSdr,
}

impl Reconstruction {
    pub fn new(cfg: &LossConfig, dtype: DType) -> Result<Self> {
        Ok(match cfg.reconstruction {
            ReconstructionKind::Mrstft => Reconstruction::Mrstft(MrStft::new(&cfg.mrstft)?),
            ReconstructionKind::Mel => Reconstruction::Mel(MelLoss::new(dtype)?),
            ReconstructionKind::SiSdr => Reconstruction::SiSdr,
        })
    }

    pub fn loss(&self, reference: &Tensor, estimate: &Tensor) -> Result<Tensor> {
        match self {
            Reconstruction::Mrstft(m) => m.loss(reference, estimate),
            Reconstruction::Mel(m) => m.loss(reference, estimate),
            Reconstruction::SiSdr => neg_si_sdr_loss(reference, estimate),
        }
    }

    /// Component name used in loss reports.
    pub fn name(&self) -> &'static str {
        match self {
            Reconstruction::Mrstft(_) => "mrstft",
            Reconstruction::Mel(_) => "mel",
            Reconstruction::SiSdr => "neg_si_sdr",
        }
    }
}

/// Total loss and its weighted components, as plain numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LossReport {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }

    /// Sum of weighted components; equals `total` by construction.
    pub fn component_sum(&self) -> f64 {
        self.components
            .iter()
            .filter(|(k, _)| k.starts_with("w_"))
            .map(|(_, v)| v)
            .sum()
    }
}

/// Differentiable total alongside its report.
pub struct GenLoss {
    pub total: Tensor,
    pub report: LossReport,
}

/// `sum_k adv_g_k + fm_weight * FM + rec_weight * REC`. Real-side features
/// should already be detached by the caller.
pub fn generator_loss(
    disc_real: &[DiscOutput],
    disc_fake: &[DiscOutput],
    reference: &Tensor,
    estimate: &Tensor,
    rec: &Reconstruction,
    cfg: &LossConfig,
) -> Result<GenLoss> {
    if disc_fake.is_empty() {
        return Err(Error::Config("generator loss needs critic outputs".into()));
    }
    let mut adv: Option<Tensor> = None;
    for o in disc_fake {
        let l = lsgan_g(&o.scores)?;
        adv = Some(match adv {
            Some(a) => (a + l)?,
            None => l,
        });
    }
    let adv = adv.expect("non-empty");
    let fm = feature_matching(disc_real, disc_fake)?;
    let r = rec.loss(reference, estimate)?;
    let w_fm = (&fm * cfg.fm_weight)?;
    let w_rec = (&r * cfg.rec_weight)?;
    let total = ((&adv + &w_fm)? + &w_rec)?;
    let mut components = BTreeMap::new();
    let (a, f, rv) = (scalar(&adv)?, scalar(&fm)?, scalar(&r)?);
    components.insert("adv_g".to_string(), a);
    components.insert("fm".to_string(), f);
    components.insert(rec.name().to_string(), rv);
    components.insert("w_adv_g".to_string(), a);
    components.insert("w_fm".to_string(), scalar(&w_fm)?);
    components.insert(format!("w_{}", rec.name()), scalar(&w_rec)?);
    let t = ensure_finite(scalar(&total)?, || "generator loss".to_string())?;
    Ok(GenLoss { total, report: LossReport { total: t, components } })
}

/// `sum_k adv_d_k` over paired critic outputs.
pub fn discriminator_loss(real: &[DiscOutput], fake: &[DiscOutput]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Config(format!(
            "discriminator loss over {} real vs {} fake outputs",
            real.len(),
            fake.len()
        )));
    }
    let mut terms = Vec::with_capacity(real.len());
    for (r, f) in real.iter().zip(fake) {
        terms.push(lsgan_d(&r.scores, &f.scores)?);
    }
    Ok(Tensor::stack(&terms, 0)?.sum(0)?)
}

/// `L_G + lambda * L_nll`.
pub fn hybrid_loss(l_g: &Tensor, nll: &Tensor, lambda: f64) -> Result<Tensor> {
    Ok((l_g.to_dtype(DType::F64)? + (nll.to_dtype(DType::F64)? * lambda)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, v.len(), &Device::Cpu).unwrap()
    }

    #[test]
    fn mel_rows_are_triangles() {
        let fb = mel_filterbank(10, 64, 16000.0);
        for m in 0..10 {
            let row = &fb[m * 33..(m + 1) * 33];
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn lsgan_values() {
        let half = t1(&[0.5; 4]);
        let (d, g) = lsgan_losses(&half, &half).unwrap();
        assert!((scalar(&d).unwrap() - 0.5).abs() < 1e-12);
        assert!((scalar(&g).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn si_sdr_loss_scale_invariant() {
        let r = Tensor::new(&[[1.0f64, -0.5, 0.25, 0.3]], &Device::Cpu).unwrap();
        let e = Tensor::new(&[[0.9f64, -0.4, 0.3, 0.2]], &Device::Cpu).unwrap();
        let a = scalar(&neg_si_sdr_loss(&r, &e).unwrap()).unwrap();
        let b = scalar(&neg_si_sdr_loss(&r, &(e * 3.0).unwrap()).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-9);
    }
}
