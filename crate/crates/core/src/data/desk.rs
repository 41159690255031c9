//! Synthetic stand-in corpus: harmonic "voiced" utterances with gliding pitch
//! and syllabic envelopes, plus coloured-noise backgrounds.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::audio::{write_wav, Waveform};
use crate::data::manifest::{generate_manifest, CleanItem, Manifest, Split};
use crate::error::{Error, Result};
use crate::SAMPLE_RATE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskCorpusConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub utterance_samples: usize,
    pub n_noises: usize,
    pub noise_samples: usize,
    pub seed: u64,
}

impl Default for DeskCorpusConfig {
    fn default() -> Self {
        Self { n_train: 10, n_val: 2, n_test: 6, utterance_samples: 8192, n_noises: 3, noise_samples: 32000, seed: 0 }
    }
}

const ASPIRATION: f64 = 0.02;
const FLOOR: f64 = 0.002;

/// One synthetic utterance.
pub fn synth_speech(rng: &mut impl Rng, len: usize) -> Vec<f32> {
    let sr = SAMPLE_RATE as f64;
    let f0_start = rng.random_range(100.0..220.0);
    let f0_end = f0_start * rng.random_range(0.7..1.4);
    let syllable_hz = rng.random_range(3.0..6.0);
    let n_harm = rng.random_range(3..7);
    let phase_off: f64 = rng.random_range(0.0..PI);
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let t = i as f64 / sr;
        let frac = i as f64 / len as f64;
        let f0 = f0_start + (f0_end - f0_start) * frac;
        phase += 2.0 * PI * f0 / sr;
        let env = (PI * syllable_hz * t + phase_off).sin().abs().powf(1.5);
        let v: f64 = (1..=n_harm).map(|h| (h as f64 * phase).sin() / h as f64).sum();
        // Aspiration follows the envelope; a faint floor keeps every band non-silent.
        let w: f64 = StandardNormal.sample(rng);
        out.push((0.3 * env * v + (ASPIRATION * env + FLOOR) * w) as f32);
    }
    out
}

/// Coloured noise: white noise through a randomly tuned two-pole resonator
/// mixed with a one-pole low-pass.
pub fn synth_noise(rng: &mut impl Rng, len: usize) -> Vec<f32> {
    let sr = SAMPLE_RATE as f64;
    let fc = rng.random_range(300.0..4000.0);
    let r: f64 = rng.random_range(0.85..0.97);
    let a1 = 2.0 * r * (2.0 * PI * fc / sr).cos();
    let a2 = -r * r;
    let lp: f64 = rng.random_range(0.5..0.95);
    let (mut y1, mut y2, mut l) = (0.0f64, 0.0f64, 0.0f64);
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let w: f64 = StandardNormal.sample(rng);
        let y = w * (1.0 - r) + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        l = lp * l + (1.0 - lp) * w;
        out.push((0.5 * y + 0.2 * l) as f32);
    }
    let peak = out.iter().fold(0f32, |m, v| m.max(v.abs()));
    out.iter().map(|v| v / peak * 0.5).collect()
}

/// Writes `clean/*.wav`, `noise/*.wav` and `manifest.jsonl` under `dir`.
pub fn make_desk_corpus(dir: impl AsRef<Path>, cfg: &DeskCorpusConfig) -> Result<PathBuf> {
    let dir = dir.as_ref();
    if cfg.utterance_samples == 0 || cfg.noise_samples == 0 || cfg.n_noises == 0 {
        return Err(Error::Config("desk corpus needs non-zero lengths and at least one noise".into()));
    }
    std::fs::create_dir_all(dir.join("clean"))?;
    std::fs::create_dir_all(dir.join("noise"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noises = Vec::new();
    for i in 0..cfg.n_noises {
        let rel = PathBuf::from(format!("noise/noise{i:03}.wav"));
        write_wav(dir.join(&rel), &Waveform::new(synth_noise(&mut rng, cfg.noise_samples)))?;
        noises.push((rel, cfg.noise_samples));
    }
    let splits = [(Split::Train, cfg.n_train, "train"), (Split::Val, cfg.n_val, "val"), (Split::Test, cfg.n_test, "test")];
    let mut clean = Vec::new();
    for (split, n, tag) in splits {
        for i in 0..n {
            let id = format!("{tag}{i:03}");
            let rel = PathBuf::from(format!("clean/{id}.wav"));
            write_wav(dir.join(&rel), &Waveform::new(synth_speech(&mut rng, cfg.utterance_samples)))?;
            clean.push(CleanItem { id, path: rel, split });
        }
    }
    let manifest: Manifest = generate_manifest(&clean, &noises, cfg.seed ^ 0x5eed, dir)?;
    let path = dir.join("manifest.jsonl");
    manifest.save(&path)?;
    Ok(path)
}
