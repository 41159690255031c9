use candle_core::Tensor;

use crate::error::{Error, Result};

/// Samples needed to bring `len` up to a multiple of `factor`.
pub fn padding_for(len: usize, factor: usize) -> usize {
    (factor - len % factor) % factor
}

/// Folds `[B, N]` audio into `[B, s, N/s]` with `out[c, t] = x[t*s + c]`.
pub fn squeeze(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, n) = x.dims2()?;
    if factor == 0 || n % factor != 0 {
        return Err(Error::Length { len: n, factor, pad: padding_for(n, factor.max(1)) });
    }
    Ok(x.reshape((b, n / factor, factor))?.transpose(1, 2)?.contiguous()?)
}

/// Exact inverse of [`squeeze`].
pub fn unsqueeze(h: &Tensor) -> Result<Tensor> {
    let (b, s, t) = h.dims3()?;
    Ok(h.transpose(1, 2)?.contiguous()?.reshape((b, s * t))?)
}
