//! Forward noising, the training loss, ancestral sampling and SDEdit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::AutoencoderBackend;
use crate::error::{Error, Result};
use crate::model::EpsilonModel;
use crate::nn::{Activations, Grads};
use crate::rng::rng_from;
use crate::schedule::NoiseSchedule;
use crate::tensor::{ImageTensor, Tensor3};

/// `sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise(z0: &Tensor3, t: usize, eps: &Tensor3, sched: &NoiseSchedule) -> Result<Tensor3> {
    sched.check(t)?;
    z0.check_same_shape(eps, "noise")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.zip_map(eps, |z, e| a * z + b * e))
}

/// Regression target of the noise-prediction model: the injected noise.
pub fn ground_truth_target(eps: &Tensor3) -> Tensor3 {
    eps.clone()
}

/// One `(t, eps)` draw: timestep first, then the noise, from the same stream.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Tensor3,
}

impl NoiseDraw {
    pub fn sample(rng: &mut ChaCha8Rng, sched: &NoiseSchedule, shape: (usize, usize, usize)) -> Self {
        let t = rng.random_range(0..sched.timesteps());
        let eps = Tensor3::randn(shape.0, shape.1, shape.2, rng);
        Self { t, eps }
    }
}

/// Denoising loss on pre-encoded latents: mean over the batch of
/// `||eps_hat - eps||^2`. Adds the gradient of that mean to `grads` when given.
pub fn ldm_loss_latents<M: EpsilonModel>(
    model: &M,
    batch: &[(Tensor3, usize)],
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    mut grads: Option<&mut Grads>,
    acts: &mut Activations,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (z0, cond) in batch {
        let draw = NoiseDraw::sample(rng, sched, z0.shape());
        let zt = forward_noise(z0, draw.t, &draw.eps, sched)?;
        let target = ground_truth_target(&draw.eps);
        match grads.as_deref_mut() {
            Some(g) => {
                let (pred, cache) = model.forward_train(&zt, draw.t, *cond, acts);
                let resid = pred.sub(&target);
                total += resid.sum_sq();
                model.backward(cache, &resid.scale(2.0 * scale), Some(g), acts);
            }
            None => {
                total += model.predict(&zt, draw.t, *cond).sub(&target).sum_sq();
            }
        }
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite("diffusion loss".into()));
    }
    Ok(loss)
}

/// Denoising loss on images.
pub fn ldm_loss<M: EpsilonModel>(
    model: &M,
    batch: &[(ImageTensor, usize)],
    backend: &AutoencoderBackend,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let latents = encode_batch(backend, batch)?;
    ldm_loss_latents(model, &latents, sched, rng, None, &mut Activations::default())
}

pub fn encode_batch(backend: &AutoencoderBackend, batch: &[(ImageTensor, usize)]) -> Result<Vec<(Tensor3, usize)>> {
    batch
        .iter()
        .map(|(x, c)| Ok((backend.encode(x)?, *c)))
        .collect()
}

/// `steps` timesteps spaced evenly from `start` down to 0 inclusive.
pub fn timestep_grid(start: usize, steps: usize) -> Vec<usize> {
    let n = steps.clamp(1, start + 1);
    if n == 1 {
        return vec![start];
    }
    (0..n)
        .map(|i| start - ((i * start) as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

/// One ancestral update from `t` to `prev` (`None` means the chain ends and
/// the predicted clean latent is returned).
pub fn ancestral_step<M: EpsilonModel>(
    model: &M,
    sched: &NoiseSchedule,
    z: &Tensor3,
    t: usize,
    prev: Option<usize>,
    cond: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor3 {
    let eps = model.predict(z, t, cond);
    let ab_t = sched.alpha_bar(t);
    let x0 = z.zip_map(&eps, |zv, ev| (zv - (1.0 - ab_t).sqrt() * ev) / ab_t.sqrt());
    let Some(s) = prev else { return x0 };
    let ab_s = sched.alpha_bar(s);
    let alpha = ab_t / ab_s;
    let beta = 1.0 - alpha;
    let c0 = ab_s.sqrt() * beta / (1.0 - ab_t);
    let ct = alpha.sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
    let std = ((1.0 - ab_s) / (1.0 - ab_t) * beta).sqrt();
    let noise = Tensor3::randn(z.height(), z.width(), z.channels(), rng);
    let mut out = x0.zip_map(z, |a, b| c0 * a + ct * b);
    out.axpy(std, &noise);
    out
}

/// Run the reverse chain over `timestep_grid(start, steps)`.
pub fn reverse_chain<M: EpsilonModel>(
    model: &M,
    sched: &NoiseSchedule,
    z_start: Tensor3,
    start: usize,
    steps: usize,
    cond: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor3> {
    sched.check(start)?;
    let grid = timestep_grid(start, steps);
    let mut z = z_start;
    for (i, &t) in grid.iter().enumerate() {
        z = ancestral_step(model, sched, &z, t, grid.get(i + 1).copied(), cond, rng);
    }
    if !z.is_finite() {
        return Err(Error::NonFinite("reverse chain output".into()));
    }
    Ok(z)
}

/// Generate a latent of spatial size `hw` from pure noise.
pub fn sample<M: EpsilonModel>(
    model: &M,
    sched: &NoiseSchedule,
    steps: usize,
    cond: usize,
    hw: (usize, usize),
    seed: u64,
) -> Result<Tensor3> {
    if steps == 0 || steps > sched.timesteps() {
        return Err(Error::invalid(format!(
            "steps must be in 1..={}, got {steps}",
            sched.timesteps()
        )));
    }
    let mut rng = rng_from(seed);
    let z = Tensor3::randn(hw.0, hw.1, model.latent_channels(), &mut rng);
    reverse_chain(model, sched, z, sched.timesteps() - 1, steps, cond, &mut rng)
}

/// Starting timestep for an edit of the given strength.
pub fn sdedit_start(strength: f64, sched: &NoiseSchedule) -> Result<usize> {
    if !(strength > 0.0 && strength < 1.0) {
        return Err(Error::invalid(format!("strength must lie in (0, 1), got {strength}")));
    }
    let t = (strength * sched.timesteps() as f64).round() as usize;
    Ok(t.min(sched.timesteps() - 1))
}

/// Encode, noise to `round(strength * T)`, denoise in `steps` steps, decode.
/// `steps = None` visits every timestep.
#[allow(clippy::too_many_arguments)]
pub fn sdedit<M: EpsilonModel>(
    model: &M,
    backend: &AutoencoderBackend,
    sched: &NoiseSchedule,
    x: &ImageTensor,
    strength: f64,
    steps: Option<usize>,
    cond: usize,
    seed: u64,
) -> Result<ImageTensor> {
    let start = sdedit_start(strength, sched)?;
    let mut rng = rng_from(seed);
    let z0 = backend.encode(x)?;
    let eps = Tensor3::randn(z0.height(), z0.width(), z0.channels(), &mut rng);
    let zt = forward_noise(&z0, start, &eps, sched)?;
    let z = reverse_chain(model, sched, zt, start, steps.unwrap_or(start + 1), cond, &mut rng)?;
    backend.decode(&z)
}
