//! Projected-gradient attacks on the latent diffusion stack.
//!
//! [`run_attack`] interleaves finetuning of a working copy of the model on
//! the current adversarial set with signed-gradient PGD steps on each image.
//! The objectives are:
//!
//! * `advdm`: raise the diffusion loss `||eps_theta(z'_t, t) - eps||^2`;
//! * `encoder-target`: pull the clean latent toward a target, `||E(x') - T||^2`;
//! * `ace`: pull the predicted noise toward the target, `||eps_theta(z'_t, t) - T||^2`;
//! * `ace-plus`: `ace` plus `alpha * ||E(x') - T||^2`;
//! * `diffusion-target`: pull the output of a short deterministic sampling
//!   chain started from `z'_t` toward the target (experimental).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderBackend;
use crate::diffusion::{forward_noise, timestep_grid, NoiseDraw};
use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, Finetuner};
use crate::model::EpsilonModel;
use crate::nn::{Activations, MemoryMode};
use crate::rng::{derive_indexed, derive_seed, rng_from};
use crate::schedule::NoiseSchedule;
use crate::tensor::{ImageTensor, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Advdm,
    EncoderTarget,
    Ace,
    AcePlus,
    DiffusionTarget,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Advdm => "advdm",
            Self::EncoderTarget => "encoder-target",
            Self::Ace => "ace",
            Self::AcePlus => "ace-plus",
            Self::DiffusionTarget => "diffusion-target",
        }
    }

    pub fn needs_target(self) -> bool {
        self != Self::Advdm
    }

    /// Untargeted loss is raised, targeted distances are lowered.
    pub fn default_direction(self) -> Direction {
        match self {
            Self::Advdm => Direction::Ascend,
            _ => Direction::Descend,
        }
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "advdm" => Self::Advdm,
            "encoder" | "encoder-target" => Self::EncoderTarget,
            "ace" => Self::Ace,
            "ace-plus" | "ace+" => Self::AcePlus,
            "diffusion" | "diffusion-target" => Self::DiffusionTarget,
            other => return Err(Error::Config(format!("unknown objective `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Ascend,
    Descend,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Self::Ascend => 1.0,
            Self::Descend => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackObjective {
    pub kind: ObjectiveKind,
    pub target: Option<Tensor3>,
    /// Weight of the encoder term in `ace-plus`.
    pub alpha: f64,
    pub direction: Direction,
    /// `(t, eps)` draws per objective evaluation.
    pub mc: usize,
    /// Starting timestep and step count of the `diffusion-target` chain.
    pub chain_start: usize,
    pub chain_steps: usize,
}

impl AttackObjective {
    fn with(kind: ObjectiveKind, target: Option<Tensor3>) -> Self {
        Self {
            kind,
            target,
            alpha: 0.0,
            direction: kind.default_direction(),
            mc: 4,
            chain_start: 300,
            chain_steps: 4,
        }
    }

    pub fn advdm() -> Self {
        Self::with(ObjectiveKind::Advdm, None)
    }

    pub fn encoder_target(target: Tensor3) -> Self {
        Self::with(ObjectiveKind::EncoderTarget, Some(target))
    }

    pub fn ace(target: Tensor3) -> Self {
        Self::with(ObjectiveKind::Ace, Some(target))
    }

    pub fn ace_plus(target: Tensor3, alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::with(ObjectiveKind::AcePlus, Some(target))
        }
    }

    pub fn diffusion_target(target: Tensor3) -> Self {
        Self::with(ObjectiveKind::DiffusionTarget, Some(target))
    }

    pub fn validate(&self, latent_shape: (usize, usize, usize)) -> Result<()> {
        if self.kind.needs_target() {
            let t = self.target.as_ref().ok_or(Error::MissingTarget(self.kind.name()))?;
            if t.shape() != latent_shape {
                return Err(Error::shape(format!(
                    "target {:?} does not match latent {:?}",
                    t.shape(),
                    latent_shape
                )));
            }
        }
        if self.kind == ObjectiveKind::AcePlus && !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("ace-plus requires a finite alpha >= 0".into()));
        }
        if self.mc == 0 {
            return Err(Error::Config("objective needs at least one Monte-Carlo draw".into()));
        }
        if self.kind == ObjectiveKind::DiffusionTarget && self.chain_steps == 0 {
            return Err(Error::Config("diffusion-target chain needs at least one step".into()));
        }
        Ok(())
    }

    fn target(&self) -> Result<&Tensor3> {
        self.target.as_ref().ok_or(Error::MissingTarget(self.kind.name()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackBudget {
    /// l-infinity radius in [0, 1] pixel units.
    pub zeta: f64,
    pub step: f64,
    /// PGD steps per epoch (K).
    pub pgd_steps: usize,
    /// Epochs (N).
    pub epochs: usize,
    /// Finetuning steps per epoch (M).
    pub finetune_steps: usize,
}

impl Default for AttackBudget {
    fn default() -> Self {
        Self {
            zeta: 4.0 / 255.0,
            step: 5e-3,
            pgd_steps: 10,
            epochs: 5,
            finetune_steps: 10,
        }
    }
}

impl AttackBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.zeta > 0.0 && self.zeta <= 1.0) {
            return Err(Error::Config(format!("zeta must lie in (0, 1], got {}", self.zeta)));
        }
        if !(self.step > 0.0 && self.step <= self.zeta) {
            return Err(Error::Config(format!(
                "step must lie in (0, zeta], got {} with zeta {}",
                self.step, self.zeta
            )));
        }
        Ok(())
    }

    pub fn total_pgd_steps(&self) -> usize {
        self.epochs * self.pgd_steps
    }
}

/// Parse `k/255`, `a/b` or a plain decimal.
pub fn parse_fraction(s: &str) -> Result<f64> {
    let bad = || Error::Config(format!("cannot parse `{s}` as a number or fraction"));
    match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            if b == 0.0 {
                return Err(bad());
            }
            Ok(a / b)
        }
        None => s.trim().parse().map_err(|_| bad()),
    }
}

/// Objective value and pixel gradient for a fixed set of draws.
#[allow(clippy::too_many_arguments)]
pub fn objective_with_draws<M: EpsilonModel>(
    obj: &AttackObjective,
    model: &M,
    backend: &AutoencoderBackend,
    sched: &NoiseSchedule,
    x: &Tensor3,
    cond: usize,
    draws: &[NoiseDraw],
    acts: &mut Activations,
) -> Result<(f64, Tensor3)> {
    let z0 = backend.encode_raw(x)?;
    obj.validate(z0.shape())?;
    let mut value = 0.0;
    let mut gz = Tensor3::zeros(z0.height(), z0.width(), z0.channels());
    match obj.kind {
        ObjectiveKind::EncoderTarget => {
            let d = z0.sub(obj.target()?);
            value = d.sum_sq();
            gz = d.scale(2.0);
        }
        ObjectiveKind::Advdm | ObjectiveKind::Ace | ObjectiveKind::AcePlus => {
            let w = 1.0 / draws.len() as f64;
            for d in draws {
                let zt = forward_noise(&z0, d.t, &d.eps, sched)?;
                let (pred, cache) = model.forward_train(&zt, d.t, cond, acts);
                let reference = match obj.kind {
                    ObjectiveKind::Advdm => &d.eps,
                    _ => obj.target()?,
                };
                let r = pred.sub(reference);
                value += w * r.sum_sq();
                let g = model.backward(cache, &r.scale(2.0 * w), None, acts);
                gz.axpy(sched.alpha_bar(d.t).sqrt(), &g);
            }
            if obj.kind == ObjectiveKind::AcePlus {
                let d = z0.sub(obj.target()?);
                value += obj.alpha * d.sum_sq();
                gz.axpy(2.0 * obj.alpha, &d);
            }
        }
        ObjectiveKind::DiffusionTarget => {
            let w = 1.0 / draws.len() as f64;
            let start = obj.chain_start.min(sched.timesteps() - 1);
            for d in draws {
                let zt = forward_noise(&z0, start, &d.eps, sched)?;
                let (out, g_zt) = ddim_chain_vjp(model, sched, &zt, start, obj.chain_steps, cond, obj.target()?, acts);
                value += w * out;
                gz.axpy(w * sched.alpha_bar(start).sqrt(), &g_zt);
            }
        }
    }
    let gx = backend.encode_vjp(x, &gz)?;
    if !value.is_finite() || !gx.is_finite() {
        return Err(Error::NonFinite(format!("{} objective", obj.kind.name())));
    }
    Ok((value, gx))
}

/// Deterministic (eta = 0) chain from `z` at `start`; returns
/// `||z0_hat - target||^2` and its gradient with respect to `z`.
#[allow(clippy::too_many_arguments)]
fn ddim_chain_vjp<M: EpsilonModel>(
    model: &M,
    sched: &NoiseSchedule,
    z: &Tensor3,
    start: usize,
    steps: usize,
    cond: usize,
    target: &Tensor3,
    acts: &mut Activations,
) -> (f64, Tensor3) {
    let grid = timestep_grid(start, steps);
    let mut caches = Vec::with_capacity(grid.len());
    let mut coefs = Vec::with_capacity(grid.len());
    let mut cur = z.clone();
    for (i, &t) in grid.iter().enumerate() {
        let ab_t = sched.alpha_bar(t);
        let ab_s = grid.get(i + 1).map_or(1.0, |&s| sched.alpha_bar(s));
        // z_s = a z_t + b eps_hat
        let a = (ab_s / ab_t).sqrt();
        let b = (1.0 - ab_s).sqrt() - a * (1.0 - ab_t).sqrt();
        let (eps, cache) = model.forward_train(&cur, t, cond, acts);
        caches.push(cache);
        coefs.push((a, b));
        cur = cur.zip_map(&eps, |zv, ev| a * zv + b * ev);
    }
    let r = cur.sub(target);
    let value = r.sum_sq();
    let mut g = r.scale(2.0);
    while let Some(cache) = caches.pop() {
        let (a, b) = coefs.pop().expect("coefficient per step");
        let through_model = model.backward(cache, &g.scale(b), None, acts);
        g = g.scale(a);
        g.add_assign(&through_model);
    }
    (value, g)
}

/// Draw `obj.mc` fresh `(t, eps)` pairs from `rng` and evaluate.
#[allow(clippy::too_many_arguments)]
pub fn objective_value_and_gradient<M: EpsilonModel>(
    obj: &AttackObjective,
    model: &M,
    backend: &AutoencoderBackend,
    sched: &NoiseSchedule,
    x: &Tensor3,
    cond: usize,
    rng: &mut ChaCha8Rng,
    acts: &mut Activations,
) -> Result<(f64, Tensor3)> {
    let draws = match obj.kind {
        ObjectiveKind::EncoderTarget => Vec::new(),
        _ => {
            let (h, w, c) = backend.latent_shape(x.height(), x.width());
            (0..obj.mc).map(|_| NoiseDraw::sample(rng, sched, (h, w, c))).collect()
        }
    };
    objective_with_draws(obj, model, backend, sched, x, cond, &draws, acts)
}

/// Signed step, projection onto the l-infinity ball, clamp to `[0, 1]`.
///
/// The projection is exact in floating point: every returned coordinate
/// satisfies `|x' - x| <= zeta` when evaluated in `f64`.
pub fn pgd_step(x_adv: &Tensor3, grad: &Tensor3, budget: &AttackBudget, x_clean: &Tensor3, direction: Direction) -> Tensor3 {
    let s = direction.sign() * budget.step;
    let zeta = budget.zeta;
    let mut out = x_adv.clone();
    for ((v, &g), &c) in out
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(x_clean.as_slice())
    {
        let sign = if g > 0.0 {
            1.0
        } else if g < 0.0 {
            -1.0
        } else {
            0.0
        };
        let mut n = *v + s * sign;
        n = n.clamp(c - zeta, c + zeta);
        while n - c > zeta {
            n = n.next_down();
        }
        while c - n > zeta {
            n = n.next_up();
        }
        *v = n.clamp(0.0, 1.0);
    }
    out
}

/// Largest absolute coordinate difference.
pub fn linf(a: &Tensor3, b: &Tensor3) -> f64 {
    a.max_abs_diff(b)
}

pub fn check_budget(x_adv: &Tensor3, x_clean: &Tensor3, zeta: f64) -> Result<()> {
    let d = linf(x_adv, x_clean);
    if d > zeta {
        return Err(Error::invalid(format!("budget violated: {d} > {zeta}")));
    }
    if x_adv.as_slice().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid("adversarial pixels left [0, 1]"));
    }
    Ok(())
}

/// Quantize to the 1/255 grid while staying inside the budget, then verify
/// in integer levels. `x_clean` must itself lie on the grid.
pub fn export_8bit(x_adv: &Tensor3, x_clean: &Tensor3, zeta: f64) -> Result<ImageTensor> {
    let radius = (zeta * 255.0 + 1e-9).floor() as i64;
    let mut out = Vec::with_capacity(x_adv.len());
    for (&a, &c) in x_adv.as_slice().iter().zip(x_clean.as_slice()) {
        let lc = (c * 255.0).round();
        if (lc - c * 255.0).abs() > 1e-6 {
            return Err(Error::invalid("clean image is not on the 8-bit grid"));
        }
        let lc = lc as i64;
        let la = ((a * 255.0).round() as i64).clamp((lc - radius).max(0), (lc + radius).min(255));
        if (la - lc).abs() > radius {
            return Err(Error::invalid("quantized budget violated"));
        }
        out.push(la as f64 / 255.0);
    }
    ImageTensor::new(Tensor3::from_vec(x_adv.height(), x_adv.width(), x_adv.channels(), out)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialExample {
    pub x_clean: ImageTensor,
    pub x_adv: ImageTensor,
    pub cond: usize,
    /// Realized l-infinity distance.
    pub linf: f64,
    /// Objective value before each PGD step.
    pub trace: Vec<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub budget: AttackBudget,
    /// Interleaved finetuning; `steps` is ignored in favour of
    /// `budget.finetune_steps`.
    pub finetune: FinetuneConfig,
    pub memory: MemoryMode,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            budget: AttackBudget::default(),
            finetune: FinetuneConfig::default(),
            memory: MemoryMode::Standard,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackCounters {
    pub pgd_steps: usize,
    pub finetune_steps: usize,
    pub peak_activation_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRun {
    pub examples: Vec<AdversarialExample>,
    pub counters: AttackCounters,
}

/// Observer called after every PGD step with `(image index, x_adv, x_clean)`.
pub type StepHook<'a> = dyn FnMut(usize, &Tensor3, &Tensor3) + 'a;

#[allow(clippy::too_many_arguments)]
pub fn run_attack<M: EpsilonModel>(
    images: &[(ImageTensor, usize)],
    model: &M,
    obj: &AttackObjective,
    cfg: &AttackConfig,
    backend: &AutoencoderBackend,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<AttackRun> {
    run_attack_with_hook(images, model, obj, cfg, backend, sched, seed, &mut |_, _, _| {})
}

/// Seed of the PGD noise stream of image `index`.
pub fn pgd_stream_seed(seed: u64, index: usize) -> u64 {
    derive_indexed(seed, "pgd", index as u64)
}

#[allow(clippy::too_many_arguments)]
pub fn run_attack_with_hook<M: EpsilonModel>(
    images: &[(ImageTensor, usize)],
    model: &M,
    obj: &AttackObjective,
    cfg: &AttackConfig,
    backend: &AutoencoderBackend,
    sched: &NoiseSchedule,
    seed: u64,
    hook: &mut StepHook<'_>,
) -> Result<AttackRun> {
    if images.is_empty() {
        return Err(Error::Empty("attack image set"));
    }
    let budget = &cfg.budget;
    budget.validate()?;
    let (h, w) = (images[0].0.height(), images[0].0.width());
    obj.validate(backend.latent_shape(h, w))?;

    let mut counters = AttackCounters::default();
    let mut finetuner = if budget.finetune_steps > 0 {
        Some(Finetuner::new(model, &cfg.finetune, derive_seed(seed, "attack-finetune"))?)
    } else {
        None
    };
    let mut rngs: Vec<ChaCha8Rng> = (0..images.len()).map(|i| rng_from(pgd_stream_seed(seed, i))).collect();
    let mut adv: Vec<Tensor3> = images.iter().map(|(x, _)| x.tensor().clone()).collect();
    let mut traces = vec![Vec::with_capacity(budget.total_pgd_steps()); images.len()];
    let mut acts = Activations::new(cfg.memory);

    for _epoch in 0..budget.epochs {
        if let Some(ft) = finetuner.as_mut() {
            let current: Vec<(Tensor3, usize)> = adv
                .iter()
                .zip(images)
                .map(|(x, (_, c))| Ok((backend.encode_raw(x)?, *c)))
                .collect::<Result<_>>()?;
            for _ in 0..budget.finetune_steps {
                ft.step(&current, sched)?;
                counters.finetune_steps += 1;
            }
        }
        for (i, (clean, cond)) in images.iter().enumerate() {
            for _ in 0..budget.pgd_steps {
                let (value, grad) = match finetuner.as_ref() {
                    Some(ft) => objective_value_and_gradient(obj, ft.model(), backend, sched, &adv[i], *cond, &mut rngs[i], &mut acts)?,
                    None => objective_value_and_gradient(obj, model, backend, sched, &adv[i], *cond, &mut rngs[i], &mut acts)?,
                };
                traces[i].push(value);
                adv[i] = pgd_step(&adv[i], &grad, budget, clean.tensor(), obj.direction);
                check_budget(&adv[i], clean.tensor(), budget.zeta)?;
                counters.pgd_steps += 1;
                hook(i, &adv[i], clean.tensor());
            }
        }
    }
    counters.peak_activation_bytes = acts.peak_bytes();

    let examples = images
        .iter()
        .zip(adv)
        .zip(traces)
        .enumerate()
        .map(|(i, (((clean, cond), x), trace))| {
            Ok(AdversarialExample {
                linf: linf(&x, clean.tensor()),
                x_adv: ImageTensor::new(x)?,
                x_clean: clean.clone(),
                cond: *cond,
                trace,
                seed: pgd_stream_seed(seed, i),
            })
        })
        .collect::<Result<_>>()?;
    Ok(AttackRun { examples, counters })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AffineEpsModel;
    use crate::unet::{ToyUnet, UnetConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn image(seed: u64, side: usize) -> ImageTensor {
        let mut rng = rng_from(seed);
        ImageTensor::new(Tensor3::from_fn(side, side, 3, |_, _, _| rng.random_range(0..=255) as f64 / 255.0)).unwrap()
    }

    #[test]
    fn parses_budget_fractions() {
        assert_eq!(parse_fraction("4/255").unwrap(), 4.0 / 255.0);
        assert_eq!(parse_fraction("5e-3").unwrap(), 5e-3);
        assert!(parse_fraction("1/0").is_err());
        assert!(parse_fraction("x").is_err());
        assert_eq!("ace+".parse::<ObjectiveKind>().unwrap(), ObjectiveKind::AcePlus);
        assert!("nope".parse::<ObjectiveKind>().is_err());
    }

    #[test]
    fn budget_validation() {
        assert!(AttackBudget::default().validate().is_ok());
        let big_step = AttackBudget {
            step: 0.1,
            ..Default::default()
        };
        assert!(big_step.validate().is_err());
        assert_eq!(AttackBudget::default().total_pgd_steps(), 50);
    }

    #[test]
    fn targeted_objectives_require_target() {
        let be = AutoencoderBackend::analytic(2, 3).unwrap();
        let model = AffineEpsModel::new(12, 0.1, 0.0);
        let mut obj = AttackObjective::ace(Tensor3::zeros(2, 2, 12));
        obj.target = None;
        let r = objective_value_and_gradient(
            &obj,
            &model,
            &be,
            &NoiseSchedule::default(),
            image(0, 4).tensor(),
            0,
            &mut rng_from(0),
            &mut Activations::default(),
        );
        assert!(matches!(r, Err(Error::MissingTarget("ace"))));
        let negative = AttackObjective::ace_plus(Tensor3::zeros(2, 2, 12), -1.0);
        assert!(negative.validate((2, 2, 12)).is_err());
    }

    #[test]
    fn encoder_target_at_own_encoding_is_stationary() {
        let be = AutoencoderBackend::analytic(2, 3).unwrap();
        let x = image(1, 4);
        let obj = AttackObjective::encoder_target(be.encode(&x).unwrap());
        let model = AffineEpsModel::new(12, 0.0, 0.0);
        let (v, g) = objective_value_and_gradient(
            &obj,
            &model,
            &be,
            &NoiseSchedule::default(),
            x.tensor(),
            0,
            &mut rng_from(0),
            &mut Activations::default(),
        )
        .unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.sum_sq(), 0.0);
    }

    #[test]
    fn ace_plus_with_zero_alpha_is_ace() {
        let be = AutoencoderBackend::analytic(2, 3).unwrap();
        let x = image(2, 8);
        let target = Tensor3::randn(4, 4, 12, &mut rng_from(3));
        let model = ToyUnet::new(UnetConfig::micro(12), 1);
        let sched = NoiseSchedule::default();
        let ace = AttackObjective::ace(target.clone());
        let mut plus = AttackObjective::ace_plus(target, 1.0);
        plus.alpha = 0.0;
        let mut r = rng_from(4);
        let draws: Vec<_> = (0..3).map(|_| NoiseDraw::sample(&mut r, &sched, (4, 4, 12))).collect();
        let eval = |o: &AttackObjective| {
            objective_with_draws(
                o,
                &model,
                &be,
                &sched,
                x.tensor(),
                1,
                &draws,
                &mut Activations::default(),
            )
            .unwrap()
        };
        let (va, ga) = eval(&ace);
        let (vp, gp) = eval(&plus);
        assert_eq!(va, vp);
        assert_eq!(ga, gp);
    }

    #[test]
    fn zero_gradient_leaves_input() {
        let x = image(5, 4);
        let out = pgd_step(x.tensor(), &Tensor3::zeros(4, 4, 3), &AttackBudget::default(), x.tensor(), Direction::Descend);
        assert_eq!(&out, x.tensor());
    }

    #[test]
    fn overshoot_lands_on_boundary() {
        let clean = Tensor3::filled(1, 1, 1, 0.5);
        let budget = AttackBudget {
            zeta: 4.0 / 255.0,
            step: 4.0 / 255.0,
            ..Default::default()
        };
        let start = Tensor3::filled(1, 1, 1, 0.5 + 3.0 / 255.0);
        let out = pgd_step(&start, &Tensor3::filled(1, 1, 1, 1.0), &budget, &clean, Direction::Ascend);
        let d = out.as_slice()[0] - 0.5;
        assert!(d <= budget.zeta && d > budget.zeta - 1e-15);
    }

    #[test]
    fn default_schedule_stays_in_budget() {
        let budget = AttackBudget::default();
        let clean = image(6, 8);
        let mut x = clean.tensor().clone();
        let mut rng = rng_from(7);
        for _ in 0..50 {
            let g = Tensor3::randn(8, 8, 3, &mut rng);
            x = pgd_step(&x, &g, &budget, clean.tensor(), Direction::Ascend);
            for (a, c) in x.as_slice().iter().zip(clean.as_slice()) {
                assert!((a - c).abs() <= 4.0 / 255.0);
            }
        }
    }

    #[test]
    fn export_stays_on_grid_and_in_budget() {
        let clean = image(8, 4);
        let zeta = 4.0 / 255.0;
        let adv = clean.tensor().map(|v| (v + zeta).min(1.0));
        let q = export_8bit(&adv, clean.tensor(), zeta).unwrap();
        for (a, c) in q.to_u8().iter().zip(clean.to_u8()) {
            assert!((*a as i32 - c as i32).abs() <= 4);
        }
        let off_grid = ImageTensor::filled(4, 4, 3, 0.3001);
        assert!(export_8bit(off_grid.tensor(), off_grid.tensor(), zeta).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn projection_respects_budget(
            seed in any::<u64>(),
            k in 1u32..=16,
            step_frac in 0.05f64..=1.0,
            ascend in any::<bool>(),
        ) {
            let zeta = k as f64 / 255.0;
            let budget = AttackBudget { zeta, step: zeta * step_frac, ..Default::default() };
            let clean = image(seed, 4);
            let mut rng = rng_from(seed ^ 1);
            let mut x = clean.tensor().clone();
            let dir = if ascend { Direction::Ascend } else { Direction::Descend };
            for _ in 0..20 {
                let g = Tensor3::randn(4, 4, 3, &mut rng);
                x = pgd_step(&x, &g, &budget, clean.tensor(), dir);
                prop_assert!(check_budget(&x, clean.tensor(), zeta).is_ok());
            }
        }
    }
}
