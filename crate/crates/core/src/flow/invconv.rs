use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::ops::{determinant, log_abs_det, matrix_inverse};
use crate::nn::params::value;
use crate::nn::{Init, ParamStore};

/// Minimum |det W| accepted before a mixing matrix is considered singular.
pub const SINGULAR_DET: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Applies the 1x1 channel mixing `W` (or its inverse) to every frame of
/// `h: [B, c, T]`. Returns the mixed signal and the log-determinant
/// contribution `±T * ln|det W|` as an f64 scalar.
pub fn invconv(h: &Tensor, w: &Tensor, direction: Direction, block: usize) -> Result<(Tensor, Tensor)> {
    let (_, c, t) = h.dims3()?;
    let (r, k) = w.dims2()?;
    if r != k || k != c {
        return Err(Error::Shape(format!(
            "block {block}: mixing matrix {r}x{k} cannot act on {c} channels"
        )));
    }
    let det = determinant(w)?;
    if !(det.abs() >= SINGULAR_DET) {
        return Err(Error::Singular { block, det });
    }
    let logdet = (log_abs_det(w)?.to_dtype(DType::F64)? * t as f64)?;
    match direction {
        Direction::Forward => Ok((w.broadcast_matmul(h)?, logdet)),
        Direction::Inverse => Ok((matrix_inverse(w)?.broadcast_matmul(h)?, logdet.neg()?)),
    }
}

/// Learned invertible 1x1 convolution, initialised as a random rotation.
pub struct InvConv {
    block: usize,
    w: Var,
}

impl InvConv {
    pub fn new(store: &mut ParamStore, block: usize, channels: usize) -> Result<Self> {
        let w = store.param(format!("block{block}.invconv.weight"), &[channels, channels], Init::Orthogonal)?;
        Ok(Self { block, w })
    }

    pub fn weight(&self) -> &Tensor {
        self.w.as_tensor()
    }

    pub fn forward(&self, h: &Tensor) -> Result<(Tensor, Tensor)> {
        invconv(h, &value(&self.w), Direction::Forward, self.block)
    }

    pub fn inverse(&self, h: &Tensor) -> Result<(Tensor, Tensor)> {
        invconv(h, &value(&self.w), Direction::Inverse, self.block)
    }
}
