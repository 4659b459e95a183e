//! A small hand-differentiated layer kit.
//!
//! Every layer exposes an explicit forward pass and a matching
//! vector-Jacobian product. Parameters live in a flat [`ParamStore`] so that
//! optimizers, adapters, checkpoints and hashing can treat any model
//! uniformly.

mod layers;
mod memory;
mod optim;
mod params;

pub use layers::{
    conv2d_backward_input, conv2d_backward_params, conv2d_forward, depth_to_space, silu,
    silu_backward, sinusoidal_embedding, space_to_depth, ConvLayer, DenseLayer, LoraFactors,
};
pub(crate) use layers::{silu_slice, silu_slice_backward};
pub use memory::{Activations, MemoryMode};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Grads, Param, ParamId, ParamRole, ParamStore};
