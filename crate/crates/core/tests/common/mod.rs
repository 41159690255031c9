#![allow(dead_code)]

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};
use sefgan::config::RunConfig;
use sefgan::data::{make_desk_corpus, Manifest, PairedDataset, SplitSelector};

pub fn t2(rows: &[Vec<f64>]) -> Tensor {
    let n = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (rows.len(), n), &Device::Cpu).unwrap()
}

pub fn val(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

/// Magnitudes `[frames][bins]` by explicit DFT sums over centered,
/// zero-padded frames with a periodic Hann window centered in `n_fft`.
pub fn direct_magnitudes(x: &[f64], n_fft: usize, hop: usize, win: usize, eps: f64) -> Vec<Vec<f64>> {
    let pad = n_fft / 2;
    let mut padded = vec![0.0; pad];
    padded.extend_from_slice(x);
    padded.extend(vec![0.0; pad]);
    let off = (n_fft - win) / 2;
    let window = |n: usize| {
        if n < off || n >= off + win {
            0.0
        } else {
            let i = (n - off) as f64;
            (PI * i / win as f64).sin().powi(2)
        }
    };
    let frames = (padded.len() - n_fft) / hop + 1;
    (0..frames)
        .map(|f| {
            (0..=n_fft / 2)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for n in 0..n_fft {
                        let v = padded[f * hop + n] * window(n);
                        let ang = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                        re += v * ang.cos();
                        im += v * ang.sin();
                    }
                    (re * re + im * im).max(eps * eps).sqrt()
                })
                .collect()
        })
        .collect()
}

/// Spectral convergence plus mean log-magnitude L1, averaged over resolutions,
/// for a batch of rows.
pub fn direct_mrstft(reference: &[Vec<f64>], estimate: &[Vec<f64>], resolutions: &[(usize, usize, usize)], eps: f64) -> f64 {
    let mut total = 0.0;
    for &(n_fft, hop, win) in resolutions {
        let (mut diff2, mut ref2, mut log_l1, mut count) = (0.0, 0.0, 0.0, 0usize);
        for (r, e) in reference.iter().zip(estimate) {
            let mr = direct_magnitudes(r, n_fft, hop, win, eps);
            let me = direct_magnitudes(e, n_fft, hop, win, eps);
            for (fr, fe) in mr.iter().zip(&me) {
                for (a, b) in fr.iter().zip(fe) {
                    diff2 += (a - b).powi(2);
                    ref2 += a * a;
                    log_l1 += (a.ln() - b.ln()).abs();
                    count += 1;
                }
            }
        }
        total += diff2.sqrt() / ref2.sqrt() + log_l1 / count as f64;
    }
    total / resolutions.len() as f64
}

pub struct DeskData {
    pub dir: tempfile::TempDir,
    pub manifest: Manifest,
    pub train: PairedDataset,
    pub val: PairedDataset,
    pub test: PairedDataset,
}

pub fn desk_data(rc: &RunConfig) -> DeskData {
    let dir = tempfile::tempdir().unwrap();
    let path = make_desk_corpus(dir.path(), &rc.data.desk).unwrap();
    let manifest = Manifest::load(&path).unwrap();
    let split = |s| PairedDataset::from_manifest(&manifest, s, rc.data.target_peak).unwrap();
    let (train, val, test) = (split(SplitSelector::Train), split(SplitSelector::Val), split(SplitSelector::Test));
    DeskData { dir, manifest, train, val, test }
}
