//! Generator: conditioning network plus invertible flow, sharing one parameter store.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{CondFeatures, CondNetConfig, Conditioner};
use crate::discriminators::DiscConfig;
use crate::error::Result;
use crate::flow::{Flow, FlowConfig, LatentState};
use crate::losses::nll_loss;
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub flow: FlowConfig,
    pub cond: CondNetConfig,
    pub disc: DiscConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        self.cond.validate(self.flow.n_blocks, self.flow.cond_channels)?;
        self.disc.validate()
    }

    /// Hex SHA-256 over the generator architecture (flow + conditioning).
    pub fn architecture_hash(&self) -> String {
        let doc = serde_json::json!({ "flow": self.flow, "cond": self.cond });
        hex::encode(Sha256::digest(doc.to_string().as_bytes()))
    }
}

pub struct Generator {
    cfg: ModelConfig,
    store: ParamStore,
    conditioner: Conditioner,
    flow: Flow,
}

impl Generator {
    pub fn new(cfg: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let conditioner = Conditioner::new(&mut store, &cfg.cond, cfg.flow.squeeze_factor, cfg.flow.n_blocks)?;
        let flow = Flow::new(&mut store, &cfg.flow)?;
        Ok(Self { cfg: cfg.clone(), store, conditioner, flow })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn flow(&self) -> &Flow {
        &self.flow
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn squeeze_factor(&self) -> usize {
        self.cfg.flow.squeeze_factor
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Conditioning features for noisy `y: [B, N]`; build once and reuse for both directions.
    pub fn cond_stack(&self, y: &Tensor) -> Result<CondFeatures> {
        self.conditioner.build(y, self.cfg.flow.squeeze_factor)
    }

    pub fn forward(&self, x: &Tensor, y: &Tensor) -> Result<LatentState> {
        let cond = self.cond_stack(y)?;
        self.flow.forward(x, &cond)
    }

    pub fn forward_with(&self, x: &Tensor, cond: &CondFeatures) -> Result<LatentState> {
        self.flow.forward(x, cond)
    }

    pub fn inverse(&self, z: &Tensor, cond: &CondFeatures) -> Result<Tensor> {
        self.flow.inverse(z, cond)
    }

    /// Batch-mean NLL in nats per dimension (f64 scalar tensor).
    pub fn nll(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let state = self.forward(x, y)?;
        nll_loss(&state.z, &state.logdet)
    }

    /// Per-item NLL in nats per dimension.
    pub fn log_likelihood(&self, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
        let state = self.forward(x, y)?;
        crate::losses::nll_per_item(&state.z, &state.logdet)
    }
}
