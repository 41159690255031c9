use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::manifest::{Manifest, SplitSelector};
use crate::data::mixing::synthesize_mixture;
use crate::data::segment::{pad_to_multiple, segment_train, SegmentSpec};
use crate::error::{Error, Result};

/// An aligned clean/noisy utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedItem {
    pub id: String,
    pub snr_db: f64,
    pub clean: Vec<f32>,
    pub noisy: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub clean: Tensor,
    pub noisy: Tensor,
}

impl Batch {
    pub fn from_rows(clean: &[Vec<f32>], noisy: &[Vec<f32>], dtype: DType) -> Result<Self> {
        let b = clean.len();
        if b == 0 || noisy.len() != b {
            return Err(Error::Shape("batch needs matching, non-empty clean/noisy rows".into()));
        }
        let n = clean[0].len();
        if clean.iter().chain(noisy).any(|r| r.len() != n) {
            return Err(Error::Shape("batch rows differ in length".into()));
        }
        let flat = |rows: &[Vec<f32>]| -> Result<Tensor> {
            let v: Vec<f32> = rows.iter().flatten().copied().collect();
            Ok(Tensor::from_vec(v, (b, n), &Device::Cpu)?.to_dtype(dtype)?)
        };
        Ok(Self { clean: flat(clean)?, noisy: flat(noisy)? })
    }

    pub fn size(&self) -> usize {
        self.clean.dim(0).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Default)]
pub struct PairedDataset {
    pub items: Vec<PairedItem>,
}

impl PairedDataset {
    pub fn from_manifest(manifest: &Manifest, split: SplitSelector, target_peak: f64) -> Result<Self> {
        let items = manifest
            .select(split)
            .into_iter()
            .map(|e| {
                let (c, y) = synthesize_mixture(manifest, e, target_peak)?;
                Ok(PairedItem { id: e.id.clone(), snr_db: e.snr_db, clean: c.samples, noisy: y.samples })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Shuffled training batches of random crops; the last batch may be short.
    pub fn train_batches(&self, spec: &SegmentSpec, batch_size: usize, dtype: DType, rng: &mut impl Rng) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let mut pairs = Vec::new();
        for item in &self.items {
            // Same crop positions for clean and noisy.
            let state: u64 = rng.random();
            let mut r1 = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(state);
            let mut r2 = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(state);
            let cs = segment_train(&item.clean, spec, &mut r1);
            let ys = segment_train(&item.noisy, spec, &mut r2);
            pairs.extend(cs.into_iter().zip(ys).map(|(c, y)| (c.samples, y.samples)));
        }
        pairs.shuffle(rng);
        pairs
            .chunks(batch_size)
            .map(|chunk| {
                let (c, y): (Vec<_>, Vec<_>) = chunk.iter().cloned().unzip();
                Batch::from_rows(&c, &y, dtype)
            })
            .collect()
    }

    /// Whole-utterance batches of size one, zero-padded to a multiple of `factor`.
    pub fn utterance_batches(&self, factor: usize, dtype: DType) -> Result<Vec<Batch>> {
        self.items
            .iter()
            .map(|it| {
                Batch::from_rows(&[pad_to_multiple(&it.clean, factor)], &[pad_to_multiple(&it.noisy, factor)], dtype)
            })
            .collect()
    }
}
