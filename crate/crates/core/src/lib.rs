//! Protective adversarial perturbations against latent-diffusion mimicry,
//! studied on a small, fully inspectable diffusion stack.
//!
//! The crate bundles everything an end-to-end experiment needs:
//!
//! - [`unet`], [`autoencoder`], [`schedule`] and [`diffusion`]: an
//!   epsilon-prediction latent diffusion model with hand-written backward
//!   passes and a recompute memory mode.
//! - [`finetune`]: low-rank adapter and full personalization.
//! - [`attack`]: PGD attacks (ACE, ACE+, AdvDM and target-only variants)
//!   with interleaved finetuning, under an exact 8-bit l-infinity budget.
//! - [`patterns`] and [`dataset`]: procedural target patterns and identities.
//! - [`analysis`]: Monte-Carlo estimators of the score-function error fields
//!   and their cosine statistics.
//! - [`metrics`] and [`defenses`]: MS-SSIM, CLIP-style scores and
//!   purification robustness runs.
//! - [`pipeline`] and [`manifest`]: staged, hashed, replayable runs, also
//!   driven by the `acelab` binary.
//! - [`study`]: the multi-identity protection study.

pub mod analysis;
pub mod attack;
pub mod autoencoder;
pub mod diffusion;
pub mod error;
pub mod dataset;
pub mod defenses;
pub mod finetune;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod patterns;
pub mod pipeline;
pub mod recipe;
pub mod rng;
pub mod schedule;
pub mod study;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
