use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Parameter initialisation schemes.
#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64),
    Normal(f64),
    /// Random orthogonal matrix with positive determinant (square shapes only).
    Orthogonal,
}

thread_local! {
    static NO_GRAD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Runs `f` with parameters handed out detached. No autograd graph is
/// recorded, so intermediates are freed as soon as they go out of scope.
/// Inference on full-size models needs this to fit in memory.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Reset(bool);
    impl Drop for Reset {
        fn drop(&mut self) {
            NO_GRAD.with(|c| c.set(self.0));
        }
    }
    let _reset = Reset(NO_GRAD.with(|c| c.replace(true)));
    f()
}

/// Current value of a parameter, detached inside [`no_grad`].
pub fn value(v: &Var) -> Tensor {
    if NO_GRAD.with(|c| c.get()) {
        v.as_tensor().detach()
    } else {
        v.as_tensor().clone()
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
    pub trainable: bool,
}

/// Named, ordered collection of model parameters.
///
/// Initial values are drawn from a seeded ChaCha stream so two stores built
/// with the same seed and the same construction order are bit-identical.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            entries: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn sample(&mut self, shape: &[usize], init: &Init) -> Result<Vec<f64>> {
        let n: usize = shape.iter().product();
        Ok(match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![*c; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..=*b)).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Init::Orthogonal => {
                let [r, c] = shape else {
                    return Err(Error::Config(format!("orthogonal init needs a matrix, got {shape:?}")));
                };
                if r != c {
                    return Err(Error::Config(format!("orthogonal init needs a square matrix, got {shape:?}")));
                }
                let g = DMatrix::<f64>::from_fn(*r, *c, |_, _| self.rng.sample(StandardNormal));
                let mut q = g.qr().q();
                if q.determinant() < 0.0 {
                    q.column_mut(0).neg_mut();
                }
                q.transpose().as_slice().to_vec()
            }
        })
    }

    fn push(&mut self, name: String, shape: &[usize], init: Init, trainable: bool) -> Result<Var> {
        if self.entries.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let values = self.sample(shape, &init)?;
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.entries.push(Param { name, var: var.clone(), trainable });
        Ok(var)
    }

    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<Var> {
        self.push(name.into(), shape, init, true)
    }

    /// Registers a trainable parameter with explicit initial values.
    pub fn param_from(&mut self, name: impl Into<String>, value: &Tensor) -> Result<Var> {
        let name = name.into();
        if self.entries.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        self.entries.push(Param { name, var: var.clone(), trainable: true });
        Ok(var)
    }

    /// Non-trainable state that still travels with checkpoints.
    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<Var> {
        self.push(name.into(), shape, init, false)
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.entries.iter().filter(|p| p.trainable).map(|p| p.var.clone()).collect()
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.var.elem_count())
            .sum()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|p| p.name == name).map(|p| &p.var)
    }

    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|p| (p.name.clone(), p.var.as_tensor().clone()))
            .collect()
    }

    /// Loads every parameter from `map[prefix + name]`; all must be present.
    pub fn load(&self, map: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for p in &self.entries {
            let key = format!("{prefix}{}", p.name);
            let t = map
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            self.set(&p.name, t)?;
        }
        Ok(())
    }

    /// Deep copy of all current values, in store order.
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        Ok(self
            .entries
            .iter()
            .map(|p| p.var.as_tensor().copy())
            .collect::<candle_core::Result<_>>()?)
    }

    pub fn restore(&self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::Shape(format!(
                "snapshot has {} tensors, store has {}",
                values.len(),
                self.entries.len()
            )));
        }
        for (p, v) in self.entries.iter().zip(values) {
            p.var.set(v)?;
        }
        Ok(())
    }

    /// SHA-256 over names and raw values, hex encoded.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for p in &self.entries {
            h.update(p.name.as_bytes());
            let v: Vec<f64> = p.var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}
