//! Low-rank adapter and full-weight finetuning on the diffusion loss.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderBackend;
use crate::diffusion::{encode_batch, ldm_loss_latents};
use crate::error::{Error, Result};
use crate::model::EpsilonModel;
use crate::nn::{Activations, Grads, MemoryMode, Optimizer, OptimizerKind};
use crate::rng::{derive_seed, rng_from};
use crate::schedule::NoiseSchedule;
use crate::tensor::{ImageTensor, Tensor3};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    #[default]
    Adapter,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub rank: usize,
    pub mode: FinetuneMode,
    /// Overrides the per-image condition ids when set.
    pub cond: Option<usize>,
    pub optimizer: OptimizerKind,
    pub batch: usize,
    pub memory: MemoryMode,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            lr: 1e-5,
            rank: 4,
            mode: FinetuneMode::Adapter,
            cond: None,
            optimizer: OptimizerKind::Sgd,
            batch: 1,
            memory: MemoryMode::Standard,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.mode == FinetuneMode::Adapter && self.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    /// Minibatch loss before each update.
    pub losses: Vec<f64>,
}

/// A model under training together with its optimizer state.
///
/// The attack loop keeps one of these alive across epochs so optimizer
/// moments carry over between the interleaved finetuning phases.
pub struct Finetuner<M: EpsilonModel> {
    model: M,
    cfg: FinetuneConfig,
    opt: Optimizer,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    steps_taken: usize,
}

impl<M: EpsilonModel> Finetuner<M> {
    /// Clones `base`, attaching adapters first in adapter mode.
    pub fn new(base: &M, cfg: &FinetuneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut model = base.clone();
        if cfg.mode == FinetuneMode::Adapter && !model.has_adapters() {
            model.attach_adapters(cfg.rank, derive_seed(seed, "adapters"))?;
        }
        let opt = Optimizer::new(cfg.optimizer, cfg.lr, model.params());
        Ok(Self {
            model,
            cfg: cfg.clone(),
            opt,
            rng: rng_from(derive_seed(seed, "finetune")),
            order: Vec::new(),
            cursor: 0,
            steps_taken: 0,
        })
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn into_model(self) -> M {
        self.model
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    fn next_batch(&mut self, data: &[(Tensor3, usize)]) -> Vec<(Tensor3, usize)> {
        if self.order.len() != data.len() {
            self.order = (0..data.len()).collect();
            self.cursor = data.len();
        }
        (0..self.cfg.batch)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                let (z, c) = &data[self.order[self.cursor]];
                self.cursor += 1;
                (z.clone(), self.cfg.cond.unwrap_or(*c))
            })
            .collect()
    }

    /// One optimizer update on a minibatch drawn from `data` (pre-encoded
    /// latents). Returns the minibatch loss before the update.
    pub fn step(&mut self, data: &[(Tensor3, usize)], sched: &NoiseSchedule) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("finetuning set"));
        }
        let batch = self.next_batch(data);
        let mut grads = Grads::zeros_like(self.model.params());
        let mut acts = Activations::new(self.cfg.memory);
        let step = self.steps_taken;
        let loss = ldm_loss_latents(&self.model, &batch, sched, &mut self.rng, Some(&mut grads), &mut acts)
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFinite(format!("finetune loss at step {step}")),
                other => other,
            })?;
        if !grads.is_finite() {
            return Err(Error::NonFinite(format!("finetune gradient at step {step}")));
        }
        let adapter_only = self.cfg.mode == FinetuneMode::Adapter;
        self.opt
            .step(self.model.params_mut(), &grads, |p| !adapter_only || p.role.is_adapter());
        self.steps_taken += 1;
        Ok(loss)
    }
}

/// Run `cfg.steps` updates of the diffusion loss on `dataset`.
pub fn finetune<M: EpsilonModel>(
    model: &M,
    dataset: &[(ImageTensor, usize)],
    cfg: &FinetuneConfig,
    backend: &AutoencoderBackend,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<(M, FinetuneReport)> {
    if dataset.is_empty() {
        return Err(Error::Empty("finetuning set"));
    }
    let latents = encode_batch(backend, dataset)?;
    finetune_latents(model, &latents, cfg, sched, seed)
}

pub fn finetune_latents<M: EpsilonModel>(
    model: &M,
    latents: &[(Tensor3, usize)],
    cfg: &FinetuneConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<(M, FinetuneReport)> {
    let mut ft = Finetuner::new(model, cfg, seed)?;
    let mut report = FinetuneReport::default();
    for _ in 0..cfg.steps {
        report.losses.push(ft.step(latents, sched)?);
    }
    Ok((ft.into_model(), report))
}
