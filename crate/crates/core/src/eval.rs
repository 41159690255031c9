//! Enhancement inference, SI-SDR scoring, likelihood histograms and
//! real-time-factor benchmarking.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{pad_to_multiple, PairedDataset};
use crate::error::{Error, Result};
use crate::model::Generator;
use crate::nn::layers::randn;
use crate::nn::no_grad;
use crate::seed::{stream_rng, STREAM_ENHANCE};

/// Aggregation cap applied to the +inf SI-SDR sentinel.
pub const SI_SDR_CAP_DB: f64 = 100.0;

/// Scale-invariant SDR in dB; `+inf` when the residual vanishes.
pub fn si_sdr(reference: &[f32], estimate: &[f32]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::Shape(format!(
            "si_sdr: reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    let rr: f64 = reference.iter().map(|&r| (r as f64).powi(2)).sum();
    if rr <= 0.0 {
        return Err(Error::Degenerate("si_sdr reference has zero energy".into()));
    }
    let er: f64 = reference.iter().zip(estimate).map(|(&r, &e)| r as f64 * e as f64).sum();
    let alpha = er / rr;
    let (mut tt, mut ee) = (0.0f64, 0.0f64);
    for (&r, &e) in reference.iter().zip(estimate) {
        let t = alpha * r as f64;
        tt += t * t;
        ee += (e as f64 - t).powi(2);
    }
    if ee < 1e-12 * tt {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (tt / ee).log10())
}

pub fn capped(v: f64) -> f64 {
    v.min(SI_SDR_CAP_DB)
}

/// Draws `z ~ N(0, temperature^2 I)` (zeros at temperature 0), runs the
/// inverse flow conditioned on `noisy`, and trims the padding.
pub fn enhance(gen: &Generator, noisy: &[f32], temperature: f64, seed: u64) -> Result<Vec<f32>> {
    if !(temperature >= 0.0) {
        return Err(Error::Config(format!("temperature must be >= 0, got {temperature}")));
    }
    if noisy.is_empty() {
        return Err(Error::Format("empty input".into()));
    }
    let s = gen.squeeze_factor();
    let padded = pad_to_multiple(noisy, s);
    let n = padded.len();
    let y = Tensor::from_vec(padded, (1, n), &Device::Cpu)?.to_dtype(gen.dtype())?;
    let mut rng = stream_rng(seed, STREAM_ENHANCE, 0);
    let z = if temperature == 0.0 {
        Tensor::zeros((1, s, n / s), gen.dtype(), &Device::Cpu)?
    } else {
        randn(&mut rng, &[1, s, n / s], temperature, gen.dtype())?
    };
    let x_hat = no_grad(|| gen.inverse(&z, &gen.cond_stack(&y)?))?;
    let mut out: Vec<f32> = x_hat.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1()?;
    out.truncate(noisy.len());
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("enhanced waveform"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileMetrics {
    pub id: String,
    pub snr_db: f64,
    pub si_sdr_noisy: f64,
    pub si_sdr_enhanced: f64,
    pub nll_per_dim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub files: usize,
    pub si_sdr_noisy: Stat,
    pub si_sdr_enhanced: Stat,
    pub si_sdr_improvement: Stat,
    pub nll_per_dim: Stat,
}

impl Aggregate {
    /// Recomputes the aggregate from per-file rows (SI-SDR capped at 100 dB).
    pub fn from_rows(rows: &[FileMetrics]) -> Self {
        let col = |f: &dyn Fn(&FileMetrics) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        Self {
            files: rows.len(),
            si_sdr_noisy: Stat::of(&col(&|r| capped(r.si_sdr_noisy))),
            si_sdr_enhanced: Stat::of(&col(&|r| capped(r.si_sdr_enhanced))),
            si_sdr_improvement: Stat::of(&col(&|r| capped(r.si_sdr_enhanced) - capped(r.si_sdr_noisy))),
            nll_per_dim: Stat::of(&col(&|r| r.nll_per_dim)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub model_hash: String,
    pub temperature: f64,
    pub seed: u64,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_file: Vec<FileMetrics>,
    pub aggregate: Aggregate,
    pub metadata: ReportMetadata,
}

fn unix_time() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn utterance_nll(gen: &Generator, clean: &[f32], noisy: &[f32]) -> Result<f64> {
    let s = gen.squeeze_factor();
    let (c, y) = (pad_to_multiple(clean, s), pad_to_multiple(noisy, s));
    let n = c.len();
    let x = Tensor::from_vec(c, (1, n), &Device::Cpu)?.to_dtype(gen.dtype())?;
    let y = Tensor::from_vec(y, (1, n), &Device::Cpu)?.to_dtype(gen.dtype())?;
    Ok(no_grad(|| gen.log_likelihood(&x, &y))?[0])
}

/// Enhances every item and scores it. Item `i` uses seed `seed + i`.
pub fn evaluate(gen: &Generator, data: &PairedDataset, temperature: f64, seed: u64) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(data.len());
    for (i, item) in data.items.iter().enumerate() {
        let est = enhance(gen, &item.noisy, temperature, seed.wrapping_add(i as u64))?;
        rows.push(FileMetrics {
            id: item.id.clone(),
            snr_db: item.snr_db,
            si_sdr_noisy: si_sdr(&item.clean, &item.noisy)?,
            si_sdr_enhanced: si_sdr(&item.clean, &est)?,
            nll_per_dim: utterance_nll(gen, &item.clean, &item.noisy)?,
        });
    }
    Ok(MetricsReport {
        aggregate: Aggregate::from_rows(&rows),
        per_file: rows,
        metadata: ReportMetadata { model_hash: gen.store().fingerprint()?, temperature, seed, timestamp: unix_time() },
    })
}

impl MetricsReport {
    /// One JSON record per file, then the aggregate and metadata records.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for r in &self.per_file {
            writeln!(f, "{}", serde_json::json!({ "kind": "file", "row": r }))?;
        }
        writeln!(f, "{}", serde_json::json!({ "kind": "aggregate", "row": self.aggregate }))?;
        writeln!(f, "{}", serde_json::json!({ "kind": "metadata", "row": self.metadata }))?;
        Ok(())
    }

    pub fn summary_table(&self) -> String {
        let a = &self.aggregate;
        let mut s = String::new();
        s.push_str("metric               mean      std\n");
        for (name, st) in [
            ("si_sdr_noisy [dB]", a.si_sdr_noisy),
            ("si_sdr_enh [dB]", a.si_sdr_enhanced),
            ("si_sdr_gain [dB]", a.si_sdr_improvement),
            ("nll [nats/dim]", a.nll_per_dim),
        ] {
            s.push_str(&format!("{name:<18} {:>8.3} {:>8.3}\n", st.mean, st.std));
        }
        s.push_str(&format!("files: {}  temperature: {}\n", a.files, self.metadata.temperature));
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllHistogram {
    pub bin_width: f64,
    /// `(id, nll_per_dim)` per utterance.
    pub values: Vec<(String, f64)>,
    /// Bin index `k` covers `[k * bin_width, (k + 1) * bin_width)`.
    pub bins: BTreeMap<i64, usize>,
}

impl NllHistogram {
    pub fn from_values(values: Vec<(String, f64)>, bin_width: f64) -> Result<Self> {
        if !(bin_width > 0.0) {
            return Err(Error::Config(format!("bin width must be positive, got {bin_width}")));
        }
        let mut bins = BTreeMap::new();
        for (_, v) in &values {
            *bins.entry((v / bin_width).floor() as i64).or_insert(0) += 1;
        }
        Ok(Self { bin_width, values, bins })
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|(_, v)| v).sum::<f64>() / self.values.len().max(1) as f64
    }
}

/// Per-utterance NLL/dim over clean/noisy pairs, binned.
pub fn nll_histogram(gen: &Generator, data: &PairedDataset, bin_width: f64) -> Result<NllHistogram> {
    let values = data
        .items
        .iter()
        .map(|it| Ok((it.id.clone(), utterance_nll(gen, &it.clean, &it.noisy)?)))
        .collect::<Result<Vec<_>>>()?;
    NllHistogram::from_values(values, bin_width)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub files: usize,
    pub audio_seconds: f64,
    pub wall_seconds: f64,
    pub rtf: f64,
    pub device: String,
    pub param_count: usize,
}

/// Times enhancement of every file after `warmup` discarded passes.
pub fn benchmark_rtf(gen: &Generator, files: &[Vec<f32>], temperature: f64, warmup: usize) -> Result<RtfReport> {
    if files.is_empty() {
        return Err(Error::Config("benchmark needs at least one file".into()));
    }
    for i in 0..warmup {
        enhance(gen, &files[i % files.len()], temperature, i as u64)?;
    }
    let audio_seconds: f64 = files.iter().map(|f| f.len() as f64 / crate::SAMPLE_RATE as f64).sum();
    let start = Instant::now();
    for (i, f) in files.iter().enumerate() {
        enhance(gen, f, temperature, i as u64)?;
    }
    let wall_seconds = start.elapsed().as_secs_f64();
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    Ok(RtfReport {
        files: files.len(),
        audio_seconds,
        wall_seconds,
        rtf: wall_seconds / audio_seconds,
        device: format!("cpu ({threads} threads available)"),
        param_count: gen.param_count(),
    })
}
