use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentSpec {
    pub segment_samples: usize,
    /// Stride of evaluation segmentation.
    pub hop: usize,
}

impl Default for SegmentSpec {
    fn default() -> Self {
        Self { segment_samples: 16380, hop: 16380 }
    }
}

impl SegmentSpec {
    pub fn validate(&self, squeeze_factor: usize) -> Result<()> {
        if self.segment_samples == 0 || self.segment_samples % squeeze_factor != 0 {
            return Err(Error::Config(format!(
                "segment_samples {} must be a positive multiple of the squeeze factor {squeeze_factor}",
                self.segment_samples
            )));
        }
        if self.hop == 0 {
            return Err(Error::Config("segment hop must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub samples: Vec<f32>,
    /// Number of real (non-padding) samples.
    pub valid: usize,
}

impl Segment {
    pub fn padded(&self) -> bool {
        self.valid < self.samples.len()
    }
}

fn take(w: &[f32], start: usize, len: usize) -> Segment {
    let end = (start + len).min(w.len());
    let mut samples = w[start..end].to_vec();
    let valid = samples.len();
    samples.resize(len, 0.0);
    Segment { start, samples, valid }
}

/// Evaluation segmentation: covers every sample, zero-padding the last segment.
pub fn segment_eval(w: &[f32], spec: &SegmentSpec) -> Vec<Segment> {
    let len = spec.segment_samples;
    if w.len() <= len {
        return vec![take(w, 0, len)];
    }
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        out.push(take(w, start, len));
        if start + len >= w.len() {
            break;
        }
        start += spec.hop;
    }
    out
}

/// Training crops: non-overlapping segments after a random start offset in
/// `[0, N mod segment]`; the partial remainder is dropped. Utterances shorter
/// than one segment are zero-padded.
pub fn segment_train(w: &[f32], spec: &SegmentSpec, rng: &mut impl Rng) -> Vec<Segment> {
    let len = spec.segment_samples;
    if w.len() <= len {
        return vec![take(w, 0, len)];
    }
    let slack = w.len() % len;
    let offset = if slack > 0 { rng.random_range(0..=slack) } else { 0 };
    let count = (w.len() - offset) / len;
    (0..count).map(|i| take(w, offset + i * len, len)).collect()
}

/// Zero-pads to the next multiple of `factor`; returns the padded copy.
pub fn pad_to_multiple(w: &[f32], factor: usize) -> Vec<f32> {
    let mut v = w.to_vec();
    v.resize(w.len().div_ceil(factor) * factor, 0.0);
    v
}
