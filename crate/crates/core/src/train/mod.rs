//! Staged training: likelihood pretraining, adversarial refinement and
//! hybrid likelihood/adversarial refinement, with resumable checkpoints.
//!
//! The trainer advances one batch per [`Trainer::step`]. Batch order and crops
//! for epoch `e` come from a generator seeded by `(seed, e)` and each latent
//! draw from `(seed, global_step)`, so a run restored from a mid-epoch
//! checkpoint replays exactly the same sequence.

pub mod checkpoint;
pub mod config;
pub mod log;
pub mod optim;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointHeader, FORMAT_VERSION};
pub use config::{HybridMode, Stage, TrainConfig};
pub use log::{LogRecord, TrainLog};
pub use optim::{exponential_lr, Adam, AdamScalars, EarlyStopping, Plateau};

use crate::data::{Batch, PairedDataset, SegmentSpec};
use crate::discriminators::{DiscOutput, Discriminators};
use crate::error::{Error, Result};
use crate::losses::{discriminator_loss, generator_loss, MrStft, MrStftConfig, Reconstruction};
use crate::model::{Generator, ModelConfig};
use crate::nn::layers::randn;
use crate::nn::no_grad;
use crate::nn::ops::scalar;
use crate::seed::{derive_seed, stream_rng, STREAM_DISC_INIT, STREAM_EPOCH, STREAM_LATENT, STREAM_VALIDATION};

/// Everything besides tensors needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub global_step: u64,
    pub optimizer_steps: u64,
    pub lr_g: f64,
    pub lr_d: Option<f64>,
    pub plateau: Plateau,
    pub early: EarlyStopping,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub val_history: Vec<f64>,
    pub epoch_sums: BTreeMap<String, f64>,
    pub epoch_batches: usize,
    pub collapse_epochs: Vec<usize>,
    pub finished: bool,
    pub stopped_early: bool,
}

/// Loss values of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub losses: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub stage: Stage,
    pub epochs: usize,
    pub global_step: u64,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub val_history: Vec<f64>,
    pub stopped_early: bool,
    pub collapse_epochs: Vec<usize>,
}

pub struct Trainer {
    stage: Stage,
    cfg: TrainConfig,
    segment: SegmentSpec,
    gen: Generator,
    disc: Option<Discriminators>,
    g_vars: Vec<Var>,
    d_vars: Vec<Var>,
    opt_g: Adam,
    opt_d: Option<Adam>,
    rec: Option<Reconstruction>,
    val_mrstft: Option<MrStft>,
    train: PairedDataset,
    val: PairedDataset,
    state: TrainState,
    best: Option<Vec<Tensor>>,
    batches: Option<Vec<Batch>>,
    out_dir: Option<PathBuf>,
    log: Option<TrainLog>,
    last_ckpt: Option<PathBuf>,
}

fn detach_outputs(outs: &[DiscOutput]) -> Vec<DiscOutput> {
    outs.iter()
        .map(|o| DiscOutput {
            scores: o.scores.detach(),
            features: o.features.iter().map(|f| f.detach()).collect(),
        })
        .collect()
}

fn add_to(map: &mut BTreeMap<String, f64>, key: &str, v: f64) {
    *map.entry(key.to_string()).or_insert(0.0) += v;
}

impl Trainer {
    /// Fresh likelihood-stage run with a newly initialised generator.
    pub fn new_nf(
        model: &ModelConfig,
        cfg: &TrainConfig,
        segment: &SegmentSpec,
        train: PairedDataset,
        val: PairedDataset,
        dtype: DType,
    ) -> Result<Self> {
        let gen = Generator::new(model, dtype, cfg.seed)?;
        Self::assemble(Stage::Nf, gen, None, cfg, segment, train, val)
    }

    /// Adversarial or hybrid run starting from a likelihood-stage checkpoint.
    pub fn from_nf(
        stage: Stage,
        init: &Checkpoint,
        cfg: &TrainConfig,
        train: PairedDataset,
        val: PairedDataset,
        dtype: DType,
    ) -> Result<Self> {
        if stage == Stage::Nf {
            return Err(Error::Config("from_nf starts an adversarial stage; use new_nf for likelihood training".into()));
        }
        if init.header.stage != Stage::Nf {
            return Err(Error::Config(format!(
                "{stage} training requires a likelihood-stage (nf) checkpoint, got a {} checkpoint",
                init.header.stage
            )));
        }
        let model = &init.header.model;
        let gen = Generator::new(model, dtype, cfg.seed)?;
        gen.store().load(&init.tensors, "gen.")?;
        let disc = Discriminators::new(&model.disc, dtype, derive_seed(cfg.seed, STREAM_DISC_INIT, 0))?;
        Self::assemble(stage, gen, Some(disc), cfg, &init.header.segment, train, val)
    }

    /// Continues exactly where `ckpt` left off.
    pub fn resume(ckpt: &Checkpoint, train: PairedDataset, val: PairedDataset) -> Result<Self> {
        let h = &ckpt.header;
        let dtype = ckpt
            .tensors
            .iter()
            .find(|(k, _)| k.starts_with("gen."))
            .map(|(_, t)| t.dtype())
            .ok_or_else(|| Error::Checkpoint("no generator tensors".into()))?;
        let gen = Generator::new(&h.model, dtype, h.train.seed)?;
        gen.store().load(&ckpt.tensors, "gen.")?;
        let disc = if h.has_discriminator {
            let d = Discriminators::new(&h.model.disc, dtype, derive_seed(h.train.seed, STREAM_DISC_INIT, 0))?;
            d.store().load(&ckpt.tensors, "disc.")?;
            Some(d)
        } else {
            None
        };
        let mut t = Self::assemble(h.stage, gen, disc, &h.train, &h.segment, train, val)?;
        if let Some(s) = &h.opt_g {
            let n = t.g_vars.len();
            t.opt_g.restore(s, ckpt.indexed("opt_g.m.", n)?, ckpt.indexed("opt_g.v.", n)?)?;
        }
        if let (Some(s), Some(opt)) = (&h.opt_d, t.opt_d.as_mut()) {
            let n = t.d_vars.len();
            opt.restore(s, ckpt.indexed("opt_d.m.", n)?, ckpt.indexed("opt_d.v.", n)?)?;
        }
        if h.has_best {
            let n = t.gen.store().entries().len();
            t.best = Some(ckpt.indexed("best.", n)?);
        }
        t.state = h.state.clone();
        Ok(t)
    }

    fn assemble(
        stage: Stage,
        gen: Generator,
        disc: Option<Discriminators>,
        cfg: &TrainConfig,
        segment: &SegmentSpec,
        train: PairedDataset,
        val: PairedDataset,
    ) -> Result<Self> {
        cfg.validate(stage)?;
        segment.validate(gen.squeeze_factor())?;
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        if val.is_empty() {
            return Err(Error::Config("validation split is empty".into()));
        }
        let dtype = gen.dtype();
        let g_vars = gen.store().trainable_vars();
        let clip = Some(cfg.grad_clip);
        let (opt_g, opt_d, d_vars, rec, val_mrstft, lr_d) = match stage {
            Stage::Nf => (Adam::new(&g_vars, cfg.nf_lr, cfg.nf_betas, clip)?, None, Vec::new(), None, None, None),
            Stage::Gan | Stage::Hybrid => {
                let d = disc.as_ref().ok_or_else(|| Error::Config("adversarial stage without discriminators".into()))?;
                let d_vars = d.store().trainable_vars();
                (
                    Adam::new(&g_vars, cfg.g_lr, cfg.gan_betas, clip)?,
                    Some(Adam::new(&d_vars, cfg.d_lr, cfg.gan_betas, clip)?),
                    d_vars,
                    Some(Reconstruction::new(&cfg.loss, dtype)?),
                    Some(MrStft::new(&MrStftConfig::default())?),
                    Some(cfg.d_lr),
                )
            }
        };
        let state = TrainState {
            stage,
            epoch: 0,
            batch_in_epoch: 0,
            global_step: 0,
            optimizer_steps: 0,
            lr_g: opt_g.lr,
            lr_d,
            plateau: Plateau::new(cfg.plateau_factor, cfg.plateau_patience),
            early: EarlyStopping::new(cfg.early_stop_patience),
            best_val: None,
            best_epoch: None,
            val_history: Vec::new(),
            epoch_sums: BTreeMap::new(),
            epoch_batches: 0,
            collapse_epochs: Vec::new(),
            finished: false,
            stopped_early: false,
        };
        Ok(Self {
            stage,
            cfg: cfg.clone(),
            segment: segment.clone(),
            gen,
            disc,
            g_vars,
            d_vars,
            opt_g,
            opt_d,
            rec,
            val_mrstft,
            train,
            val,
            state,
            best: None,
            batches: None,
            out_dir: None,
            log: None,
            last_ckpt: None,
        })
    }

    /// Writes `train_log.jsonl`, `last.ckpt` and `best.ckpt` under `dir`.
    pub fn with_output_dir(mut self, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.log = Some(TrainLog::open(dir.join("train_log.jsonl"))?);
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn generator(&self) -> &Generator {
        &self.gen
    }

    pub fn discriminators(&self) -> Option<&Discriminators> {
        self.disc.as_ref()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn is_finished(&self) -> bool {
        self.state.finished
    }

    /// Latent draw for generation at the current step, `[B, s, N/s]`.
    fn latent(&self, batch: usize, frames: usize) -> Result<Tensor> {
        let mut rng = stream_rng(self.cfg.seed, STREAM_LATENT, self.state.global_step);
        let s = self.gen.squeeze_factor();
        randn(&mut rng, &[batch, s, frames], self.cfg.latent_temperature, self.gen.dtype())
    }

    fn ensure_batches(&mut self) -> Result<()> {
        if self.batches.is_none() {
            let tag = match self.stage {
                Stage::Nf => 0,
                Stage::Gan => 1 << 32,
                Stage::Hybrid => 2 << 32,
            };
            let mut rng = stream_rng(self.cfg.seed, STREAM_EPOCH, tag | self.state.epoch as u64);
            let b = self.train.train_batches(&self.segment, self.cfg.batch_size, self.gen.dtype(), &mut rng)?;
            self.batches = Some(b);
        }
        Ok(())
    }

    /// Trains on the next batch. Returns `None` once the stage has finished.
    pub fn step(&mut self) -> Result<Option<StepRecord>> {
        if self.state.finished {
            return Ok(None);
        }
        self.ensure_batches()?;
        let batches = self.batches.as_ref().expect("built above");
        let batch = batches[self.state.batch_in_epoch].clone();
        let n_batches = batches.len();
        let losses = match self.stage {
            Stage::Nf => self.nf_step(&batch),
            Stage::Gan => self.gan_step(&batch, None),
            Stage::Hybrid => self.hybrid_step(&batch),
        };
        let losses = match losses {
            Ok(l) => l,
            Err(e @ Error::NonFinite { .. }) => {
                let last = self
                    .last_ckpt
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "none".into());
                return Err(Error::Aborted(format!(
                    "{e} at step {}; last good checkpoint: {last}",
                    self.state.global_step
                )));
            }
            Err(e) => return Err(e),
        };
        let record = StepRecord { step: self.state.global_step, epoch: self.state.epoch, losses };
        for (k, v) in &record.losses {
            add_to(&mut self.state.epoch_sums, k, *v);
        }
        self.state.epoch_batches += 1;
        self.state.global_step += 1;
        self.state.batch_in_epoch += 1;
        if let Some(log) = self.log.as_mut() {
            log.write(&LogRecord::Step {
                stage: self.stage,
                step: record.step,
                epoch: record.epoch,
                losses: record.losses.clone(),
                lr_g: self.state.lr_g,
                lr_d: self.state.lr_d,
            })?;
        }
        if self.state.batch_in_epoch == n_batches {
            self.end_epoch()?;
        }
        Ok(Some(record))
    }

    fn nf_step(&mut self, batch: &Batch) -> Result<BTreeMap<String, f64>> {
        let loss = self.gen.nll(&batch.clean, &batch.noisy)?;
        let grads = loss.backward()?;
        let norm = self.opt_g.step(&self.g_vars, &grads)?;
        self.state.optimizer_steps += 1;
        Ok(BTreeMap::from([("nll".to_string(), scalar(&loss)?), ("grad_norm".to_string(), norm)]))
    }

    /// Critic update followed by a generator update. With `nll_term`, the
    /// generator objective becomes `L_G + lambda * L_nll`.
    fn gan_step(&mut self, batch: &Batch, nll_term: Option<f64>) -> Result<BTreeMap<String, f64>> {
        let (x, y) = (&batch.clean, &batch.noisy);
        let (b, n) = x.dims2()?;
        let cond = self.gen.cond_stack(y)?;
        let z = self.latent(b, n / self.gen.squeeze_factor())?;
        let x_hat = self.gen.inverse(&z, &cond)?;
        let disc = self.disc.as_ref().expect("adversarial stage");
        let opt_d = self.opt_d.as_mut().expect("adversarial stage");

        disc.refresh_spectral_norm()?;
        let real = disc.forward(x)?;
        let fake = disc.forward(&x_hat.detach())?;
        let l_d = discriminator_loss(&real, &fake)?;
        let l_d_value = crate::nn::ops::ensure_finite(scalar(&l_d)?, || "discriminator loss".into())?;
        opt_d.step(&self.d_vars, &l_d.backward()?)?;
        self.state.optimizer_steps += 1;

        let real = detach_outputs(&disc.forward(x)?);
        let fake = disc.forward(&x_hat)?;
        let rec = self.rec.as_ref().expect("adversarial stage");
        let g = generator_loss(&real, &fake, x, &x_hat, rec, &self.cfg.loss)?;
        let mut losses = g.report.components.clone();
        let total = match nll_term {
            Some(lambda) => {
                let state = self.gen.forward_with(x, &cond)?;
                let nll = crate::losses::nll_loss(&state.z, &state.logdet)?;
                losses.insert("nll".into(), scalar(&nll)?);
                crate::losses::hybrid_loss(&g.total, &nll, lambda)?
            }
            None => g.total,
        };
        let total_value = crate::nn::ops::ensure_finite(scalar(&total)?, || "generator loss".into())?;
        let norm = self.opt_g.step(&self.g_vars, &total.backward()?)?;
        self.state.optimizer_steps += 1;
        losses.insert("adv_d".into(), l_d_value);
        losses.insert("total_g".into(), total_value);
        losses.insert("grad_norm".into(), norm);
        Ok(losses)
    }

    fn hybrid_step(&mut self, batch: &Batch) -> Result<BTreeMap<String, f64>> {
        match self.cfg.hybrid_mode {
            HybridMode::Combined => self.gan_step(batch, Some(self.cfg.lambda)),
            HybridMode::TwoStep => {
                let nll = self.gen.nll(&batch.clean, &batch.noisy)?;
                let nll_value = scalar(&nll)?;
                // With lambda = 0 the likelihood update would only replay
                // Adam momentum, so it is skipped entirely.
                if self.cfg.lambda > 0.0 {
                    let grads = (nll * self.cfg.lambda)?.backward()?;
                    self.opt_g.step(&self.g_vars, &grads)?;
                    self.state.optimizer_steps += 1;
                }
                let mut losses = self.gan_step(batch, None)?;
                losses.insert("nll".into(), nll_value);
                Ok(losses)
            }
        }
    }

    /// Mean validation NLL/dim (likelihood stage) or MRSTFT of generated audio.
    pub fn validate(&self) -> Result<f64> {
        no_grad(|| self.validate_inner())
    }

    fn validate_inner(&self) -> Result<f64> {
        let s = self.gen.squeeze_factor();
        let batches = self.val.utterance_batches(s, self.gen.dtype())?;
        let mut total = 0.0;
        for (i, b) in batches.iter().enumerate() {
            total += match self.stage {
                Stage::Nf => scalar(&self.gen.nll(&b.clean, &b.noisy)?)?,
                Stage::Gan | Stage::Hybrid => {
                    let (bs, n) = b.clean.dims2()?;
                    let mut rng = stream_rng(self.cfg.seed, STREAM_VALIDATION, i as u64);
                    let z = randn(&mut rng, &[bs, s, n / s], self.cfg.latent_temperature, self.gen.dtype())?;
                    let x_hat = self.gen.inverse(&z, &self.gen.cond_stack(&b.noisy)?)?;
                    let m = self.val_mrstft.as_ref().expect("adversarial stage");
                    scalar(&m.loss(&b.clean, &x_hat.detach())?)?
                }
            };
        }
        Ok(total / batches.len() as f64)
    }

    fn end_epoch(&mut self) -> Result<()> {
        let val = self.validate()?;
        let epoch = self.state.epoch;
        self.state.val_history.push(val);
        let improved = self.state.best_val.is_none_or(|b| val < b);
        if improved {
            self.state.best_val = Some(val);
            self.state.best_epoch = Some(epoch);
            self.best = Some(self.gen.store().snapshot()?);
        }
        let means: BTreeMap<String, f64> = self
            .state
            .epoch_sums
            .iter()
            .map(|(k, v)| (k.clone(), v / self.state.epoch_batches.max(1) as f64))
            .collect();
        match self.stage {
            Stage::Nf => {
                let (_, stop) = self.state.early.observe(val);
                self.state.lr_g = self.state.plateau.observe(val, self.state.lr_g);
                self.opt_g.lr = self.state.lr_g;
                if stop {
                    self.state.stopped_early = true;
                    self.state.finished = true;
                }
                if epoch + 1 >= self.cfg.nf_max_epochs {
                    self.state.finished = true;
                }
            }
            Stage::Gan | Stage::Hybrid => {
                if means.get("adv_d").is_some_and(|&d| d < self.cfg.collapse_threshold) {
                    ::log::warn!("epoch {epoch}: discriminator loss below {} (collapse)", self.cfg.collapse_threshold);
                    self.state.collapse_epochs.push(epoch);
                }
                self.state.lr_g = exponential_lr(self.cfg.g_lr, self.cfg.lr_decay_gan, epoch + 1);
                let lr_d = exponential_lr(self.cfg.d_lr, self.cfg.lr_decay_gan, epoch + 1);
                self.state.lr_d = Some(lr_d);
                self.opt_g.lr = self.state.lr_g;
                if let Some(o) = self.opt_d.as_mut() {
                    o.lr = lr_d;
                }
                if epoch + 1 >= self.cfg.gan_epochs {
                    self.state.finished = true;
                }
            }
        }
        if let Some(log) = self.log.as_mut() {
            log.write(&LogRecord::Epoch {
                stage: self.stage,
                epoch,
                train: means,
                val,
                lr_g: self.state.lr_g,
                lr_d: self.state.lr_d,
                improved,
            })?;
        }
        self.state.epoch += 1;
        self.state.batch_in_epoch = 0;
        self.state.epoch_sums.clear();
        self.state.epoch_batches = 0;
        self.batches = None;
        if let Some(dir) = self.out_dir.clone() {
            let last = dir.join("last.ckpt");
            self.checkpoint()?.save(&last)?;
            self.last_ckpt = Some(last);
            if improved {
                self.best_checkpoint()?.save(dir.join("best.ckpt"))?;
            }
        }
        Ok(())
    }

    /// Runs until the stage finishes or `max_steps` more batches have been trained.
    pub fn run(&mut self, max_steps: Option<u64>) -> Result<RunSummary> {
        let mut taken = 0u64;
        while !self.state.finished && max_steps.is_none_or(|m| taken < m) {
            self.step()?;
            taken += 1;
        }
        Ok(self.summary())
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            stage: self.stage,
            epochs: self.state.epoch,
            global_step: self.state.global_step,
            best_val: self.state.best_val,
            best_epoch: self.state.best_epoch,
            val_history: self.state.val_history.clone(),
            stopped_early: self.state.stopped_early,
            collapse_epochs: self.state.collapse_epochs.clone(),
        }
    }

    /// Complete resumable snapshot of the run.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = std::collections::HashMap::new();
        for (k, v) in self.gen.store().named_tensors() {
            tensors.insert(format!("gen.{k}"), v);
        }
        if let Some(d) = &self.disc {
            for (k, v) in d.store().named_tensors() {
                tensors.insert(format!("disc.{k}"), v);
            }
        }
        let (m, v) = self.opt_g.moments();
        for (i, (a, b)) in m.iter().zip(v).enumerate() {
            tensors.insert(checkpoint::indexed_name("opt_g.m.", i), a.clone());
            tensors.insert(checkpoint::indexed_name("opt_g.v.", i), b.clone());
        }
        if let Some(o) = &self.opt_d {
            let (m, v) = o.moments();
            for (i, (a, b)) in m.iter().zip(v).enumerate() {
                tensors.insert(checkpoint::indexed_name("opt_d.m.", i), a.clone());
                tensors.insert(checkpoint::indexed_name("opt_d.v.", i), b.clone());
            }
        }
        if let Some(best) = &self.best {
            for (i, t) in best.iter().enumerate() {
                tensors.insert(checkpoint::indexed_name("best.", i), t.clone());
            }
        }
        let model = self.gen.config().clone();
        Ok(Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                stage: self.stage,
                config_hash: model.architecture_hash(),
                model,
                train: self.cfg.clone(),
                segment: self.segment.clone(),
                state: self.state.clone(),
                opt_g: Some(self.opt_g.scalars()),
                opt_d: self.opt_d.as_ref().map(Adam::scalars),
                has_discriminator: self.disc.is_some(),
                has_best: self.best.is_some(),
            },
            tensors,
        })
    }

    /// Checkpoint whose generator weights are the best-validation ones.
    pub fn best_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.checkpoint()?;
        if let Some(best) = &self.best {
            for (p, t) in self.gen.store().entries().iter().zip(best) {
                ck.tensors.insert(format!("gen.{}", p.name), t.clone());
            }
        }
        Ok(ck)
    }

    /// Loads the best-validation weights into the live generator.
    pub fn restore_best(&self) -> Result<()> {
        if let Some(best) = &self.best {
            self.gen.store().restore(best)?;
        }
        Ok(())
    }
}

/// Builds a generator from a checkpoint (any stage).
pub fn generator_from_checkpoint(ckpt: &Checkpoint) -> Result<Generator> {
    let dtype = ckpt
        .tensors
        .iter()
        .find(|(k, _)| k.starts_with("gen."))
        .map(|(_, t)| t.dtype())
        .ok_or_else(|| Error::Checkpoint("no generator tensors".into()))?;
    let gen = Generator::new(&ckpt.header.model, dtype, ckpt.header.train.seed)?;
    gen.store().load(&ckpt.tensors, "gen.")?;
    Ok(gen)
}
