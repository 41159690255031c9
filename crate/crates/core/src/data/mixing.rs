use crate::data::audio::{energy, read_wav, Waveform};
use crate::data::manifest::{Manifest, ManifestEntry};
use crate::error::{Error, Result};

pub const DEFAULT_TARGET_PEAK: f64 = 0.95;

/// Gain applied to `noise` so that `clean + gain * noise` has the requested SNR.
pub fn scale_noise_for_snr(clean: &[f32], noise: &[f32], snr_db: f64) -> Result<f64> {
    if clean.len() != noise.len() {
        return Err(Error::Shape(format!("clean has {} samples, noise {}", clean.len(), noise.len())));
    }
    let (ec, en) = (energy(clean), energy(noise));
    if ec <= 0.0 {
        return Err(Error::Degenerate("clean signal has zero energy".into()));
    }
    if en <= 0.0 {
        return Err(Error::Degenerate("noise signal has zero energy".into()));
    }
    Ok((ec / (en * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// `10 log10(|x|^2 / |y - x|^2)`.
pub fn measured_snr_db(clean: &[f32], noisy: &[f32]) -> f64 {
    let num: f64 = energy(clean);
    let den: f64 = clean
        .iter()
        .zip(noisy)
        .map(|(&c, &y)| {
            let d = y as f64 - c as f64;
            d * d
        })
        .sum();
    10.0 * (num / den).log10()
}

/// Crops `noise` at `offset` to `len` samples, wrapping around when short.
pub fn crop_looped(noise: &[f32], offset: usize, len: usize) -> Vec<f32> {
    (0..len).map(|i| noise[(offset + i) % noise.len()]).collect()
}

/// Mixes already-loaded sources; returns (clean, noisy) jointly normalised to `target_peak`.
pub fn mix_signals(clean: &[f32], noise: &[f32], noise_offset: usize, snr_db: f64, target_peak: f64) -> Result<(Vec<f32>, Vec<f32>)> {
    if noise.is_empty() {
        return Err(Error::Degenerate("noise signal is empty".into()));
    }
    let n = crop_looped(noise, noise_offset, clean.len());
    let gain = scale_noise_for_snr(clean, &n, snr_db)?;
    let noisy: Vec<f64> = clean.iter().zip(&n).map(|(&c, &v)| c as f64 + gain * v as f64).collect();
    let peak = clean
        .iter()
        .map(|v| (*v as f64).abs())
        .chain(noisy.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    let scale = target_peak / peak;
    let clean_out = clean.iter().map(|&c| (c as f64 * scale) as f32).collect();
    let noisy_out = noisy.iter().map(|&y| (y * scale) as f32).collect();
    Ok((clean_out, noisy_out))
}

/// Loads the entry's sources and produces the (clean, noisy) pair.
pub fn synthesize_mixture(manifest: &Manifest, entry: &ManifestEntry, target_peak: f64) -> Result<(Waveform, Waveform)> {
    let clean = read_wav(manifest.resolve(&entry.clean_path))?;
    let noise = read_wav(manifest.resolve(&entry.noise_path))?;
    let (c, y) = mix_signals(&clean.samples, &noise.samples, entry.noise_offset, entry.snr_db, target_peak)?;
    Ok((Waveform::new(c), Waveform::new(y)))
}
