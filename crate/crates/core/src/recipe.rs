//! Pretraining recipe for the toy backbone.
//!
//! The backbone is trained on identities disjoint from the ones later
//! protected and finetuned, so personalization has something to learn.
//! Condition id 0 plays the generic class prompt and id 1 the identifier
//! token that finetuning binds to one identity; pretraining sees both.

use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderBackend;
use crate::dataset::{generate_images, ToyDatasetSpec};
use crate::diffusion::encode_batch;
use crate::error::Result;
use crate::finetune::{finetune_latents, FinetuneConfig, FinetuneMode, FinetuneReport};
use crate::nn::{MemoryMode, OptimizerKind};
use crate::rng::derive_seed;
use crate::schedule::NoiseSchedule;
use crate::unet::{ToyUnet, UnetConfig};

/// Condition id of the generic class prompt.
pub const CLASS_COND: usize = 0;
/// Condition id of the identifier token used for personalization.
pub const IDENTITY_COND: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub dataset: ToyDatasetSpec,
    pub unet: UnetConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            dataset: ToyDatasetSpec {
                groups: 16,
                per_group: 8,
                seed: 1000,
                ..Default::default()
            },
            unet: UnetConfig {
                latent_channels: 12,
                ..Default::default()
            },
            steps: 1500,
            batch: 8,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Randomly initialize a backbone from `cfg.seed` and train it in full.
pub fn pretrain_backbone(
    cfg: &PretrainConfig,
    backend: &AutoencoderBackend,
    sched: &NoiseSchedule,
) -> Result<(ToyUnet, FinetuneReport)> {
    let images: Vec<_> = generate_images(&cfg.dataset)?
        .into_iter()
        .map(|im| (im.image, im.index % 2))
        .collect();
    let latents = encode_batch(backend, &images)?;
    let init = ToyUnet::new(cfg.unet.clone(), derive_seed(cfg.seed, "backbone-init"));
    let train = FinetuneConfig {
        steps: cfg.steps,
        lr: cfg.lr,
        rank: 0,
        mode: FinetuneMode::Full,
        cond: None,
        optimizer: OptimizerKind::adam(),
        batch: cfg.batch,
        memory: MemoryMode::Standard,
    };
    finetune_latents(&init, &latents, &train, sched, derive_seed(cfg.seed, "backbone-train"))
}
