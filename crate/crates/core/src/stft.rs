//! Differentiable short-time power spectrum computed with an FFT on the host.
//!
//! Frames are centered: the signal is zero-padded by `n_fft / 2` on both
//! sides, so `frames = 1 + N / hop` (integer division). The window is a
//! periodic Hann of `win` samples, zero-padded and centered in `n_fft`.

use std::f64::consts::PI;
use std::sync::Arc;

use candle_core::{bail, CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::Result;

/// Periodic Hann window of `win` samples, zero-padded and centered in `n_fft`.
pub fn padded_hann(n_fft: usize, win: usize) -> Vec<f64> {
    let mut w = vec![0.0; n_fft];
    let off = (n_fft - win) / 2;
    for i in 0..win {
        w[off + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos();
    }
    w
}

#[derive(Clone)]
struct StftPower {
    n_fft: usize,
    hop: usize,
    window: Arc<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl StftPower {
    fn frames(&self, n: usize) -> usize {
        (n + 2 * (self.n_fft / 2) - self.n_fft) / self.hop + 1
    }

    /// Windowed spectrum of frame `f` of signal `x`.
    fn spectrum(&self, x: &[f64], f: usize, buf: &mut [Complex64]) {
        let pad = self.n_fft / 2;
        let start = (f * self.hop) as isize - pad as isize;
        for (j, c) in buf.iter_mut().enumerate() {
            let idx = start + j as isize;
            let v = if idx >= 0 && (idx as usize) < x.len() { x[idx as usize] } else { 0.0 };
            *c = Complex64::new(v * self.window[j], 0.0);
        }
        self.fft.process(buf);
    }

    fn forward_host(&self, x: &[f64], b: usize, n: usize) -> Vec<f64> {
        let bins = self.n_fft / 2 + 1;
        let frames = self.frames(n);
        let mut out = vec![0.0; b * bins * frames];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for bi in 0..b {
            let sig = &x[bi * n..(bi + 1) * n];
            for f in 0..frames {
                self.spectrum(sig, f, &mut buf);
                for k in 0..bins {
                    out[(bi * bins + k) * frames + f] = buf[k].norm_sqr();
                }
            }
        }
        out
    }

    /// `dL/dx[n] = sum_frames 2 w[j] Re(sum_k G_k conj(S_k) e^{-2 pi i k j / n_fft})`.
    fn backward_host(&self, x: &[f64], g: &[f64], b: usize, n: usize) -> Vec<f64> {
        let bins = self.n_fft / 2 + 1;
        let frames = self.frames(n);
        let pad = self.n_fft / 2;
        let mut out = vec![0.0; b * n];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for bi in 0..b {
            let sig = &x[bi * n..(bi + 1) * n];
            for f in 0..frames {
                self.spectrum(sig, f, &mut buf);
                for (k, c) in buf.iter_mut().enumerate() {
                    *c = if k < bins { c.conj() * g[(bi * bins + k) * frames + f] } else { Complex64::new(0.0, 0.0) };
                }
                self.fft.process(&mut buf);
                let start = (f * self.hop) as isize - pad as isize;
                for j in 0..self.n_fft {
                    let idx = start + j as isize;
                    if idx >= 0 && (idx as usize) < n {
                        out[bi * n + idx as usize] += 2.0 * self.window[j] * buf[j].re;
                    }
                }
            }
        }
        out
    }
}

fn host_f64(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<f64>> {
    let Some((a, b)) = l.contiguous_offsets() else {
        bail!("stft_power requires a contiguous input")
    };
    Ok(match s {
        CpuStorage::F32(v) => v[a..b].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[a..b].to_vec(),
        _ => bail!("stft_power: unsupported dtype"),
    })
}

impl CustomOp1 for StftPower {
    fn name(&self) -> &'static str {
        "stft_power"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, n) = l.shape().dims2()?;
        let x = host_f64(s, l)?;
        let out = self.forward_host(&x, b, n);
        let shape = Shape::from((b, self.n_fft / 2 + 1, self.frames(n)));
        Ok(match s {
            CpuStorage::F32(_) => (CpuStorage::F32(out.iter().map(|&v| v as f32).collect()), shape),
            _ => (CpuStorage::F64(out), shape),
        })
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, n) = arg.dims2()?;
        let x: Vec<f64> = arg.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let g: Vec<f64> = grad.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let out = self.backward_host(&x, &g, b, n);
        Ok(Some(Tensor::from_vec(out, (b, n), arg.device())?.to_dtype(arg.dtype())?))
    }
}

/// Short-time power spectrum operator for one resolution.
pub struct Stft {
    op: StftPower,
}

impl Stft {
    pub fn new(n_fft: usize, hop: usize, win: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Self { op: StftPower { n_fft, hop, window: Arc::new(padded_hann(n_fft, win)), fft } }
    }

    pub fn n_fft(&self) -> usize {
        self.op.n_fft
    }

    pub fn frames(&self, n: usize) -> usize {
        self.op.frames(n)
    }

    /// Power spectrum `[B, n_fft/2 + 1, frames]` of `x: [B, N]`.
    pub fn power(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.contiguous()?.apply_op1(self.op.clone())?)
    }

    /// Floored magnitude `sqrt(max(|S|^2, eps^2))`.
    pub fn magnitude(&self, x: &Tensor, eps: f64) -> Result<Tensor> {
        Ok(self.power(x)?.maximum(eps * eps)?.sqrt()?)
    }
}
