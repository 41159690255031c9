use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::scalar;

/// Adam with bias correction and optional global-norm gradient clipping.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamScalars {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

impl Adam {
    pub fn new(vars: &[Var], lr: f64, betas: (f64, f64), clip_norm: Option<f64>) -> Result<Self> {
        let zeros = |v: &Var| v.as_tensor().zeros_like();
        let m = vars.iter().map(zeros).collect::<candle_core::Result<Vec<_>>>()?;
        let v = vars.iter().map(zeros).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { lr, beta1: betas.0, beta2: betas.1, eps: 1e-8, clip_norm, step: 0, m, v })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn scalars(&self) -> AdamScalars {
        AdamScalars { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, step: self.step }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, s: &AdamScalars, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state holds {} moments, model has {}",
                m.len(),
                self.m.len()
            )));
        }
        for (a, b) in m.iter().zip(&self.m).chain(v.iter().zip(&self.v)) {
            if a.dims() != b.dims() {
                return Err(Error::Checkpoint("optimizer moment shape mismatch".into()));
            }
        }
        self.lr = s.lr;
        self.beta1 = s.beta1;
        self.beta2 = s.beta2;
        self.eps = s.eps;
        self.step = s.step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Global L2 norm of the gradients present for `vars`.
    pub fn grad_norm(vars: &[Var], grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for var in vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                total += scalar(&g.to_dtype(DType::F64)?.sqr()?.sum_all()?)?;
            }
        }
        Ok(total.sqrt())
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn step(&mut self, vars: &[Var], grads: &GradStore) -> Result<f64> {
        if vars.len() != self.m.len() {
            return Err(Error::Config(format!("optimizer built for {} vars, got {}", self.m.len(), vars.len())));
        }
        let norm = Self::grad_norm(vars, grads)?;
        if !norm.is_finite() {
            return Err(Error::non_finite("gradient norm"));
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / (norm + 1e-6),
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, var) in vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            // Gradients of reused tensors can still carry graph history; keep
            // the moments free of it so steps do not chain onto each other.
            let g = g.detach();
            let g = if scale != 1.0 { (g * scale)? } else { g };
            let m = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(norm)
    }
}

/// Multiplies the rate by `factor` after more than `patience` epochs without improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self { factor, patience, best: None, bad_epochs: 0 }
    }

    /// Returns the new rate.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        match self.best {
            Some(b) if metric >= b - 1e-4 * b.abs() => {
                self.bad_epochs += 1;
                if self.bad_epochs > self.patience {
                    self.bad_epochs = 0;
                    return lr * self.factor;
                }
            }
            _ => {
                self.best = Some(metric);
                self.bad_epochs = 0;
            }
        }
        lr
    }
}

/// Signals a stop once `patience` consecutive epochs fail to improve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, bad_epochs: 0 }
    }

    /// Returns `(improved, stop)`.
    pub fn observe(&mut self, metric: f64) -> (bool, bool) {
        match self.best {
            Some(b) if metric >= b => {
                self.bad_epochs += 1;
                (false, self.bad_epochs >= self.patience)
            }
            _ => {
                self.best = Some(metric);
                self.bad_epochs = 0;
                (true, false)
            }
        }
    }
}

/// `lr0 * gamma^epoch`.
pub fn exponential_lr(lr0: f64, gamma: f64, epoch: usize) -> f64 {
    lr0 * gamma.powi(epoch as i32)
}
