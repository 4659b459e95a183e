//! Monte-Carlo estimators of the error and bias fields, the pairwise cosine
//! protocol and heatmap rendering.
//!
//! All estimators pair their model evaluations on common noise draws: the
//! same `eps_i` noises the clean and the adversarial latent, so differences
//! carry no sampling noise from the forward process itself.

use std::collections::BTreeMap;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderBackend;
use crate::diffusion::forward_noise;
use crate::error::{Error, Result};
use crate::model::EpsilonModel;
use crate::rng::rng_from;
use crate::schedule::NoiseSchedule;
use crate::tensor::{cosine, ImageTensor, Tensor3};

/// Timesteps used for reported diagnostics.
pub const PROBE_TIMESTEPS: [usize; 5] = [100, 300, 500, 700, 900];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKind {
    EpsAdv,
    ReverseBias,
    SamplingBias,
    SamplingError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasField {
    pub kind: BiasKind,
    pub data: Tensor3,
    /// One entry for point estimates, several for accumulations.
    pub timesteps: Vec<usize>,
    pub mc_samples: usize,
    pub sources: Vec<String>,
}

impl BiasField {
    pub fn norm(&self) -> f64 {
        self.data.norm()
    }
}

fn noise_draws(seed: u64, mc: usize, shape: (usize, usize, usize)) -> Vec<Tensor3> {
    let mut rng = rng_from(seed);
    (0..mc).map(|_| Tensor3::randn(shape.0, shape.1, shape.2, &mut rng)).collect()
}

fn check_mc(mc: usize) -> Result<()> {
    if mc == 0 {
        return Err(Error::invalid("mc must be at least 1"));
    }
    Ok(())
}

/// Mean of `f(eps_i)` over common draws.
fn mc_mean(draws: &[Tensor3], mut f: impl FnMut(&Tensor3) -> Result<Tensor3>) -> Result<Tensor3> {
    let mut acc: Option<Tensor3> = None;
    for e in draws {
        let v = f(e)?;
        match acc.as_mut() {
            Some(a) => a.add_assign(&v),
            None => acc = Some(v),
        }
    }
    let mut out = acc.ok_or(Error::Empty("Monte-Carlo draws"))?;
    out.scale_assign(1.0 / draws.len() as f64);
    if !out.is_finite() {
        return Err(Error::NonFinite("bias estimate".into()));
    }
    Ok(out)
}

/// `E[eps_theta(z'_t)] - E[eps_theta(z_t)]`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_eps_adv<M: EpsilonModel>(
    theta: &M,
    x: &ImageTensor,
    x_adv: &ImageTensor,
    t: usize,
    mc: usize,
    cond: usize,
    backend: &AutoencoderBackend,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<BiasField> {
    sched.check(t)?;
    check_mc(mc)?;
    x.check_same_shape(x_adv, "adversarial image")?;
    let z = backend.encode(x)?;
    let za = backend.encode(x_adv)?;
    let draws = noise_draws(seed, mc, z.shape());
    let data = mc_mean(&draws, |e| {
        let zt = forward_noise(&z, t, e, sched)?;
        let zat = forward_noise(&za, t, e, sched)?;
        Ok(theta.predict(&zat, t, cond).sub(&theta.predict(&zt, t, cond)))
    })?;
    Ok(BiasField {
        kind: BiasKind::EpsAdv,
        data,
        timesteps: vec![t],
        mc_samples: mc,
        sources: vec![theta.params().hash(), x.content_hash(), x_adv.content_hash()],
    })
}

/// `E[eps_phi(z'_t) - eps_theta(z'_t)] - E[eps_theta*(z_t) - eps_theta(z_t)]`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_reverse_bias<M: EpsilonModel>(
    theta: &M,
    theta_star: &M,
    phi: &M,
    x: &ImageTensor,
    x_adv: &ImageTensor,
    t: usize,
    mc: usize,
    cond: usize,
    backend: &AutoencoderBackend,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<BiasField> {
    sched.check(t)?;
    check_mc(mc)?;
    x.check_same_shape(x_adv, "adversarial image")?;
    for m in [theta_star, phi] {
        if m.latent_channels() != theta.latent_channels() {
            return Err(Error::shape("models disagree on latent channels"));
        }
    }
    let z = backend.encode(x)?;
    let za = backend.encode(x_adv)?;
    let draws = noise_draws(seed, mc, z.shape());
    let data = mc_mean(&draws, |e| {
        let zt = forward_noise(&z, t, e, sched)?;
        let zat = forward_noise(&za, t, e, sched)?;
        let adv_shift = phi.predict(&zat, t, cond).sub(&theta.predict(&zat, t, cond));
        let clean_shift = theta_star.predict(&zt, t, cond).sub(&theta.predict(&zt, t, cond));
        Ok(adv_shift.sub(&clean_shift))
    })?;
    Ok(BiasField {
        kind: BiasKind::ReverseBias,
        data,
        timesteps: vec![t],
        mc_samples: mc,
        sources: vec![
            theta.params().hash(),
            theta_star.params().hash(),
            phi.params().hash(),
            x.content_hash(),
            x_adv.content_hash(),
        ],
    })
}

/// `E[eps_phi(z_t) - eps]` on an image outside the finetuning set.
#[allow(clippy::too_many_arguments)]
pub fn estimate_sampling_bias<M: EpsilonModel>(
    phi: &M,
    x_holdout: &ImageTensor,
    t: usize,
    mc: usize,
    cond: usize,
    backend: &AutoencoderBackend,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<BiasField> {
    sched.check(t)?;
    check_mc(mc)?;
    let z = backend.encode(x_holdout)?;
    let draws = noise_draws(seed, mc, z.shape());
    let data = mc_mean(&draws, |e| {
        let zt = forward_noise(&z, t, e, sched)?;
        Ok(phi.predict(&zt, t, cond).sub(e))
    })?;
    Ok(BiasField {
        kind: BiasKind::SamplingBias,
        data,
        timesteps: vec![t],
        mc_samples: mc,
        sources: vec![phi.params().hash(), x_holdout.content_hash()],
    })
}

/// `sum_t beta(t) * B_spl(t)`.
pub fn accumulate_sampling_error(fields: &BTreeMap<usize, BiasField>, sched: &NoiseSchedule) -> Result<BiasField> {
    let mut iter = fields.iter();
    let (&t0, first) = iter.next().ok_or(Error::Empty("sampling-bias fields"))?;
    sched.check(t0)?;
    let mut data = first.data.scale(sched.beta(t0));
    let mut mc = first.mc_samples;
    let mut sources = first.sources.clone();
    for (&t, f) in iter {
        sched.check(t)?;
        f.data.check_same_shape(&first.data, "sampling-bias field")?;
        data.axpy(sched.beta(t), &f.data);
        mc = mc.min(f.mc_samples);
        sources.extend(f.sources.iter().cloned());
    }
    sources.sort();
    sources.dedup();
    Ok(BiasField {
        kind: BiasKind::SamplingError,
        data,
        timesteps: fields.keys().copied().collect(),
        mc_samples: mc,
        sources,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineReport {
    /// `entries[a][b]`; `None` where either field has zero norm.
    pub entries: Vec<Vec<Option<f64>>>,
    pub mean: f64,
    pub undefined: usize,
}

/// Cosine similarity of every pair in `A x B`, averaged over defined pairs.
pub fn cosine_protocol(a: &[&Tensor3], b: &[&Tensor3]) -> Result<CosineReport> {
    pairwise(a, b, false)
}

/// Mean cosine over distinct pairs of one set.
pub fn mean_pairwise_cosine(fields: &[&Tensor3]) -> Result<CosineReport> {
    pairwise(fields, fields, true)
}

fn pairwise(a: &[&Tensor3], b: &[&Tensor3], skip_diagonal: bool) -> Result<CosineReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("cosine protocol set"));
    }
    let shape = a[0].shape();
    if a.iter().chain(b).any(|f| f.shape() != shape) {
        return Err(Error::shape("cosine protocol fields differ in shape"));
    }
    let mut entries = Vec::with_capacity(a.len());
    let (mut sum, mut n, mut undefined) = (0.0, 0usize, 0usize);
    for (i, fa) in a.iter().enumerate() {
        let mut row = Vec::with_capacity(b.len());
        for (j, fb) in b.iter().enumerate() {
            let c = cosine(fa, fb);
            if !(skip_diagonal && i == j) {
                match c {
                    Some(v) => {
                        sum += v;
                        n += 1;
                    }
                    None => undefined += 1,
                }
            }
            row.push(c);
        }
        entries.push(row);
    }
    if undefined > 0 {
        warn!("cosine protocol: {undefined} pair(s) with a zero-norm field excluded");
    }
    if n == 0 {
        return Err(Error::invalid("no pair with nonzero norms"));
    }
    Ok(CosineReport {
        entries,
        mean: sum / n as f64,
        undefined,
    })
}

/// `(E - min) / (max - min)`; a constant field maps to 0.5 everywhere.
pub fn normalize_field(e: &Tensor3) -> Tensor3 {
    let (lo, hi) = (e.min(), e.max());
    if hi > lo {
        let span = hi - lo;
        e.map(|v| (v - lo) / span)
    } else {
        warn!("normalize_field: constant field, rendering as 0.5");
        e.map(|_| 0.5)
    }
}

/// Diverging blue-white-red color for a value in [0, 1].
fn diverging(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    if v < 0.5 {
        let s = v / 0.5;
        [s, s, 1.0]
    } else {
        let s = (1.0 - v) / 0.5;
        [1.0, s, s]
    }
}

/// Normalized field rendered as one colored tile per latent channel, side by
/// side with a one-pixel white gutter.
pub fn heatmap(e: &Tensor3) -> ImageTensor {
    let n = normalize_field(e);
    let (h, w, c) = n.shape();
    let width = c * w + c.saturating_sub(1);
    let mut out = Tensor3::filled(h, width, 3, 1.0);
    for ch in 0..c {
        let x0 = ch * (w + 1);
        for y in 0..h {
            for x in 0..w {
                let rgb = diverging(n.get(y, x, ch));
                for (k, v) in rgb.iter().enumerate() {
                    out.set(y, x0 + x, k, *v);
                }
            }
        }
    }
    ImageTensor::from_clamped(out)
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_mean_ci(values: &[f64], reps: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("bootstrap sample"));
    }
    if !(level > 0.0 && level < 1.0) || reps == 0 {
        return Err(Error::invalid("bootstrap needs reps >= 1 and level in (0, 1)"));
    }
    let mut rng = rng_from(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..reps)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(|a, b| a.total_cmp(b));
    let tail = (1.0 - level) / 2.0;
    let idx = |q: f64| ((q * (reps - 1) as f64).round() as usize).min(reps - 1);
    Ok((means[idx(tail)], means[idx(1.0 - tail)]))
}
