//! Minimal neural-network building blocks on top of candle tensors.

pub mod layers;
pub mod ops;
pub mod params;

pub use layers::{Conv1d, ConvSpec, Norm};
pub use params::{no_grad, Init, Param, ParamStore};
