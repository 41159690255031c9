use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::SAMPLE_RATE;

/// Mono 16 kHz audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Self {
        Self { samples, sample_rate: SAMPLE_RATE }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::Format(format!("sample rate {} Hz, expected {SAMPLE_RATE}", self.sample_rate)));
        }
        if self.samples.is_empty() {
            return Err(Error::Format("empty waveform".into()));
        }
        if let Some(i) = self.samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("waveform sample {i}")));
        }
        Ok(())
    }

    pub fn energy(&self) -> f64 {
        energy(&self.samples)
    }
}

pub fn energy(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64) * (v as f64)).sum()
}

/// Reads a 16-bit PCM (or 32-bit float) mono 16 kHz WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| match e {
            hound::Error::IoError(io) => Error::Io(io),
            other => Error::Format(format!("{}: {other}", path.display())),
        })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!("{}: {} channels, expected mono", path.display(), spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Format(format!(
            "{}: sample rate {} Hz, expected {SAMPLE_RATE}",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        (SampleFormat::Float, 32) => reader.samples::<f32>().collect::<std::result::Result<Vec<_>, _>>()?,
        (fmt, bits) => {
            return Err(Error::Format(format!("{}: unsupported {bits}-bit {fmt:?} samples", path.display())))
        }
    };
    let w = Waveform { samples, sample_rate: spec.sample_rate };
    w.validate()?;
    Ok(w)
}

/// Writes 16-bit PCM mono, clipping to [-1, 1).
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    if let Some(parent) = path.as_ref().parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let spec = WavSpec { channels: 1, sample_rate: w.sample_rate, bits_per_sample: 16, sample_format: SampleFormat::Int };
    let mut writer = WavWriter::create(path, spec)?;
    for &v in &w.samples {
        writer.write_sample(quantize(v))?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn quantize(v: f32) -> i16 {
    (v as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}
