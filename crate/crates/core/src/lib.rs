//! Conditional normalizing-flow speech enhancement with adversarial and
//! hybrid likelihood/adversarial refinement.

pub mod conditioning;
pub mod config;
pub mod data;
pub mod discriminators;
pub mod error;
pub mod eval;
pub mod flow;
pub mod losses;
pub mod model;
pub mod nn;
pub mod seed;
pub mod stft;
pub mod train;

pub use error::{Error, Result};
pub use model::{Generator, ModelConfig};

/// Fixed sample rate of every waveform handled by the crate.
pub const SAMPLE_RATE: u32 = 16_000;
