//! The noise-prediction network contract.
//!
//! Models predict the injected Gaussian noise of a noised latent. The
//! "score-function error" of a prediction is its residual against that
//! noise, so the model output, the regression target and every bias field
//! live in the same space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activations, Grads, ParamRole, ParamStore};
use crate::tensor::Tensor3;

/// A trainable `(z_t, t, condition) -> predicted noise` map with an explicit
/// vector-Jacobian product.
pub trait EpsilonModel: Clone + Send + Sync {
    /// Whatever the forward pass must keep for the backward pass.
    type Cache: Send;

    fn latent_channels(&self) -> usize;

    fn condition_vocab(&self) -> usize;

    fn predict(&self, z: &Tensor3, t: usize, cond: usize) -> Tensor3;

    fn forward_train(&self, z: &Tensor3, t: usize, cond: usize, acts: &mut Activations) -> (Tensor3, Self::Cache);

    /// Pull `grad_out` back to the input latent; accumulate parameter
    /// gradients into `grads` when given.
    fn backward(&self, cache: Self::Cache, grad_out: &Tensor3, grads: Option<&mut Grads>, acts: &mut Activations) -> Tensor3;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// Attach zero-initialized low-rank adapters; returns the number of
    /// adapter scalars added.
    fn attach_adapters(&mut self, _rank: usize, _seed: u64) -> Result<usize> {
        Err(Error::invalid("model has no adapter-eligible layers"))
    }

    fn has_adapters(&self) -> bool {
        self.params().iter().any(|p| p.role.is_adapter())
    }

    /// Hash of the frozen backbone weights only.
    fn base_hash(&self) -> String {
        self.params().hash_where(|p| p.role == ParamRole::Base)
    }
}

/// Two-parameter model `eps_hat = a * z + b`, elementwise.
///
/// Small enough for exhaustive finite-difference checks of the training
/// loss and attack objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineEpsModel {
    channels: usize,
    params: ParamStore,
}

impl AffineEpsModel {
    pub fn new(channels: usize, a: f64, b: f64) -> Self {
        let mut params = ParamStore::new();
        params.push("a", vec![1], ParamRole::Base, vec![a]);
        params.push("b", vec![1], ParamRole::Base, vec![b]);
        Self { channels, params }
    }

    fn ab(&self) -> (f64, f64) {
        let a = self.params.get(crate::nn::ParamId(0))[0];
        let b = self.params.get(crate::nn::ParamId(1))[0];
        (a, b)
    }
}

impl EpsilonModel for AffineEpsModel {
    type Cache = Tensor3;

    fn latent_channels(&self) -> usize {
        self.channels
    }

    fn condition_vocab(&self) -> usize {
        1
    }

    fn predict(&self, z: &Tensor3, _t: usize, _cond: usize) -> Tensor3 {
        let (a, b) = self.ab();
        z.map(|v| a * v + b)
    }

    fn forward_train(&self, z: &Tensor3, t: usize, cond: usize, acts: &mut Activations) -> (Tensor3, Tensor3) {
        acts.retain(z.len());
        (self.predict(z, t, cond), z.clone())
    }

    fn backward(&self, z: Tensor3, grad_out: &Tensor3, grads: Option<&mut Grads>, acts: &mut Activations) -> Tensor3 {
        let (a, _) = self.ab();
        if let Some(g) = grads {
            g.get_mut(crate::nn::ParamId(0))[0] += z.dot(grad_out);
            g.get_mut(crate::nn::ParamId(1))[0] += grad_out.sum();
        }
        acts.release(z.len());
        grad_out.scale(a)
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}
