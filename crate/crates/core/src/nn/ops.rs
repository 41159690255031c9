//! Differentiable tensor primitives that candle does not provide (or does not
//! differentiate correctly): im2col-based 1-D convolution, matrix inverse and
//! log-absolute-determinant, and a few small activations.

use candle_core::backend::BackendStorage;
use candle_core::{bail, CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, WithDType, D};
use nalgebra::DMatrix;

use crate::error::{Error, Result};

fn contiguous<'a, T>(v: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => bail!("{op} requires a contiguous input"),
    }
}

/// im2col for `[B, C, L]` inputs: produces `[B, C*K, L_out]` where row `c*K + k`
/// holds the input sample each output position reads through tap `k`.
#[derive(Debug, Clone, Copy)]
struct Unfold {
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
}

impl Unfold {
    fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }

    fn source(&self, out_pos: usize, tap: usize, len: usize) -> Option<usize> {
        let j = (out_pos * self.stride + tap * self.dilation) as isize - self.padding as isize;
        (j >= 0 && (j as usize) < len).then_some(j as usize)
    }

    fn unfold<T: WithDType>(&self, x: &[T], rows: usize, len: usize) -> Vec<T> {
        let lo = self.out_len(len);
        let mut out = vec![T::zero(); rows * self.kernel * lo];
        for r in 0..rows {
            let src = &x[r * len..(r + 1) * len];
            for k in 0..self.kernel {
                let base = (r * self.kernel + k) * lo;
                let dst = &mut out[base..base + lo];
                for (o, d) in dst.iter_mut().enumerate() {
                    if let Some(j) = self.source(o, k, len) {
                        *d = src[j];
                    }
                }
            }
        }
        out
    }

    fn fold<T: WithDType>(&self, g: &[T], rows: usize, len: usize) -> Vec<T> {
        let lo = self.out_len(len);
        let mut out = vec![T::zero(); rows * len];
        for r in 0..rows {
            let dst = &mut out[r * len..(r + 1) * len];
            for k in 0..self.kernel {
                let base = (r * self.kernel + k) * lo;
                for (o, v) in g[base..base + lo].iter().enumerate() {
                    if let Some(j) = self.source(o, k, len) {
                        dst[j] += *v;
                    }
                }
            }
        }
        out
    }
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold1d"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, len) = l.shape().dims3()?;
        if len + 2 * self.padding < self.dilation * (self.kernel - 1) + 1 {
            bail!("unfold1d: input of length {len} shorter than the receptive field");
        }
        let lo = self.out_len(len);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(self.unfold(contiguous(v, l, "unfold1d")?, b * c, len)),
            CpuStorage::F64(v) => CpuStorage::F64(self.unfold(contiguous(v, l, "unfold1d")?, b * c, len)),
            _ => bail!("unfold1d: unsupported dtype {:?}", s.dtype()),
        };
        Ok((out, Shape::from((b, c * self.kernel, lo))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let fold = Fold { unfold: *self, len: arg.dim(2)? };
        Ok(Some(grad.contiguous()?.apply_op1(fold)?))
    }
}

/// Adjoint of [`Unfold`] (col2im with overlap-add).
#[derive(Debug, Clone, Copy)]
struct Fold {
    unfold: Unfold,
    len: usize,
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold1d"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, ck, _) = l.shape().dims3()?;
        let c = ck / self.unfold.kernel;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(self.unfold.fold(contiguous(v, l, "fold1d")?, b * c, self.len)),
            CpuStorage::F64(v) => CpuStorage::F64(self.unfold.fold(contiguous(v, l, "fold1d")?, b * c, self.len)),
            _ => bail!("fold1d: unsupported dtype {:?}", s.dtype()),
        };
        Ok((out, Shape::from((b, c, self.len))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(self.unfold)?))
    }
}

/// 1-D convolution of `x: [B, C_in, L]` with `w: [C_out, C_in / groups, K]`.
pub fn conv1d(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: usize,
    dilation: usize,
    groups: usize,
) -> Result<Tensor> {
    let (b, c_in, _) = x.dims3()?;
    let (c_out, c_in_g, k) = w.dims3()?;
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 || c_in_g * groups != c_in {
        return Err(Error::Shape(format!(
            "conv1d: input channels {c_in}, kernel {:?}, groups {groups}",
            w.dims()
        )));
    }
    if k == 1 && stride == 1 && padding == 0 && groups == 1 {
        return Ok(w.squeeze(2)?.broadcast_matmul(x)?);
    }
    let cols = x
        .contiguous()?
        .apply_op1(Unfold { kernel: k, stride, dilation, padding })?;
    let l_out = cols.dim(2)?;
    if groups == 1 {
        return Ok(w.reshape((c_out, c_in * k))?.broadcast_matmul(&cols)?);
    }
    if groups == c_in && c_out == c_in {
        // depthwise
        let cols = cols.reshape((b, c_in, k, l_out))?;
        let w = w.reshape((1, c_in, k, 1))?;
        return Ok(cols.broadcast_mul(&w)?.sum(2)?);
    }
    let cols = cols.reshape((b, groups, c_in_g * k, l_out))?;
    let w = w.reshape((groups, c_out / groups, c_in_g * k))?;
    Ok(w.broadcast_matmul(&cols)?.reshape((b, c_out, l_out))?)
}

fn host_matrix(v: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, v)
}

fn to_f64<T: WithDType>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64()).collect()
}

fn square_dim(l: &Layout, op: &str) -> candle_core::Result<usize> {
    let (r, c) = l.shape().dims2()?;
    if r != c {
        bail!("{op}: expected a square matrix, got {r}x{c}");
    }
    Ok(r)
}

struct MatInverse;

impl CustomOp1 for MatInverse {
    fn name(&self) -> &'static str {
        "mat_inverse"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = square_dim(l, "mat_inverse")?;
        let m = match s {
            CpuStorage::F32(v) => host_matrix(&to_f64(contiguous(v, l, "mat_inverse")?), n),
            CpuStorage::F64(v) => host_matrix(contiguous(v, l, "mat_inverse")?, n),
            _ => bail!("mat_inverse: unsupported dtype {:?}", s.dtype()),
        };
        let Some(inv) = m.try_inverse() else {
            bail!("mat_inverse: matrix is singular")
        };
        // nalgebra is column-major; transpose to emit row-major data.
        let data: Vec<f64> = inv.transpose().as_slice().to_vec();
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(data.iter().map(|&x| x as f32).collect()),
            _ => CpuStorage::F64(data),
        };
        Ok((out, Shape::from((n, n))))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        // d(W^-1) = -W^-1 dW W^-1  =>  dL/dW = -W^-T G W^-T
        let rt = res.t()?;
        Ok(Some(rt.matmul(grad)?.matmul(&rt)?.neg()?))
    }
}

struct LogAbsDet;

fn log_abs_det_host(m: DMatrix<f64>) -> f64 {
    let lu = m.lu();
    lu.u().diagonal().iter().map(|d| d.abs().ln()).sum()
}

impl CustomOp1 for LogAbsDet {
    fn name(&self) -> &'static str {
        "log_abs_det"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = square_dim(l, "log_abs_det")?;
        let out = match s {
            CpuStorage::F32(v) => {
                let m = host_matrix(&to_f64(contiguous(v, l, "log_abs_det")?), n);
                CpuStorage::F32(vec![log_abs_det_host(m) as f32])
            }
            CpuStorage::F64(v) => {
                let m = host_matrix(contiguous(v, l, "log_abs_det")?, n);
                CpuStorage::F64(vec![log_abs_det_host(m)])
            }
            _ => bail!("log_abs_det: unsupported dtype {:?}", s.dtype()),
        };
        Ok((out, Shape::from(())))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let inv_t = arg.contiguous()?.apply_op1(MatInverse)?.t()?;
        Ok(Some(inv_t.broadcast_mul(grad)?))
    }
}

/// Differentiable inverse of a square matrix.
pub fn matrix_inverse(w: &Tensor) -> Result<Tensor> {
    Ok(w.contiguous()?.apply_op1(MatInverse)?)
}

/// Differentiable `ln|det W|` as a rank-0 tensor of the same dtype as `w`.
pub fn log_abs_det(w: &Tensor) -> Result<Tensor> {
    Ok(w.contiguous()?.apply_op1(LogAbsDet)?)
}

/// Determinant of a square matrix tensor, evaluated on the host in f64.
pub fn determinant(w: &Tensor) -> Result<f64> {
    let n = w.dim(0)?;
    let v: Vec<f64> = w.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok(host_matrix(&v, n).determinant())
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Reflect-pads the last dimension on the right by `n` samples (numpy "reflect").
pub fn reflect_pad_right(x: &Tensor, n: usize) -> Result<Tensor> {
    if n == 0 {
        return Ok(x.clone());
    }
    let len = x.dim(D::Minus1)?;
    if n >= len {
        return Err(Error::Shape(format!("reflect padding {n} needs more than {len} samples")));
    }
    let idx: Vec<u32> = (0..len + n)
        .map(|i| if i < len { i } else { 2 * (len - 1) - i } as u32)
        .collect();
    let idx = Tensor::from_vec(idx, len + n, x.device())?;
    Ok(x.index_select(&idx, x.rank() - 1)?)
}

/// Non-overlapping mean pooling by 2 over the last dimension (odd tail dropped).
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let len = *dims.last().unwrap();
    let half = len / 2;
    let x = x.narrow(dims.len() - 1, 0, half * 2)?;
    let mut shape = dims[..dims.len() - 1].to_vec();
    shape.extend([half, 2]);
    Ok(x.reshape(shape)?.mean(D::Minus1)?)
}

/// Reads a scalar tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn ensure_finite(value: f64, stage: impl FnOnce() -> String) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::non_finite(stage()))
    }
}
