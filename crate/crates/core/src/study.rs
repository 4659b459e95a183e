//! The end-to-end toy study: pretrain a backbone, protect each identity with
//! several attacks, personalize victims on clean and protected sets, and
//! measure the error fields, sampling error and SDEdit fidelity.

use std::collections::BTreeMap;

use log::info;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    cosine_protocol, estimate_eps_adv, estimate_reverse_bias, estimate_sampling_bias, mean_pairwise_cosine,
    PROBE_TIMESTEPS,
};
use crate::attack::{export_8bit, run_attack, AttackBudget, AttackConfig, AttackObjective};
use crate::autoencoder::AutoencoderBackend;
use crate::diffusion::sdedit;
use crate::dataset::{generate_images, split_protected, ToyDatasetSpec, ToyImage};
use crate::error::Result;
use crate::finetune::{finetune, FinetuneConfig};
use crate::metrics::{ms_ssim, MsSsimConfig};
use crate::model::EpsilonModel;
use crate::nn::OptimizerKind;
use crate::patterns::{encode_target, generate_pattern, PatternSpec, TargetLatent};
use crate::recipe::{pretrain_backbone, PretrainConfig, IDENTITY_COND};
use crate::rng::{derive_indexed, derive_seed};
use crate::schedule::NoiseSchedule;
use crate::tensor::{cosine, ImageTensor, Tensor3};
use crate::unet::ToyUnet;

/// Which protection a variant applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Targeted attack with interleaved finetuning.
    Ace,
    /// Untargeted loss ascent on the frozen backbone.
    Advdm,
    /// Untargeted loss ascent with interleaved finetuning.
    Aspl,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ace => "ace",
            Self::Advdm => "advdm",
            Self::Aspl => "aspl",
        }
    }

    pub fn objective(self, target: &Tensor3) -> AttackObjective {
        match self {
            Self::Ace => AttackObjective::ace(target.clone()),
            Self::Advdm | Self::Aspl => AttackObjective::advdm(),
        }
    }

    pub fn budget(self, base: &AttackBudget) -> AttackBudget {
        match self {
            Self::Advdm => AttackBudget {
                finetune_steps: 0,
                ..base.clone()
            },
            _ => base.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub pretrain: PretrainConfig,
    pub dataset: ToyDatasetSpec,
    /// Images per identity that are protected; the rest are held out.
    pub protected: usize,
    /// Identities to run; empty means all.
    pub groups: Vec<usize>,
    pub pattern: PatternSpec,
    pub budget: AttackBudget,
    pub objective_mc: usize,
    /// Interleaved finetuning inside the attack.
    pub attack_finetune: FinetuneConfig,
    /// Personalization of the victim models.
    pub victim: FinetuneConfig,
    pub analysis_mc: usize,
    pub probes: Vec<usize>,
    /// Protected images per identity that get a reverse-bias estimate.
    pub reverse_bias_images: usize,
    pub sdedit_strength: f64,
    pub sdedit_steps: usize,
    pub variants: Vec<Variant>,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            pretrain: PretrainConfig::default(),
            dataset: ToyDatasetSpec::default(),
            protected: 10,
            groups: Vec::new(),
            pattern: PatternSpec::default(),
            budget: AttackBudget::default(),
            objective_mc: 4,
            attack_finetune: FinetuneConfig {
                lr: 1e-3,
                optimizer: OptimizerKind::adam(),
                batch: 4,
                ..Default::default()
            },
            victim: FinetuneConfig {
                steps: 200,
                lr: 1e-3,
                optimizer: OptimizerKind::adam(),
                batch: 4,
                cond: Some(IDENTITY_COND),
                ..Default::default()
            },
            analysis_mc: 64,
            probes: PROBE_TIMESTEPS.to_vec(),
            reverse_bias_images: 2,
            sdedit_strength: 0.3,
            sdedit_steps: 50,
            variants: vec![Variant::Ace, Variant::Advdm, Variant::Aspl],
            seed: 0,
        }
    }
}

/// Backbone, codec and data shared by every identity.
#[derive(Clone, Debug)]
pub struct ToyWorld {
    pub backend: AutoencoderBackend,
    pub sched: NoiseSchedule,
    pub theta: ToyUnet,
    pub images: Vec<ToyImage>,
    pub target: TargetLatent,
}

impl ToyWorld {
    /// Pretrain a backbone from `cfg.pretrain` and assemble the world.
    pub fn build(cfg: &StudyConfig) -> Result<Self> {
        let backend = AutoencoderBackend::analytic(2, 3)?;
        let sched = NoiseSchedule::default();
        let (theta, report) = pretrain_backbone(&cfg.pretrain, &backend, &sched)?;
        if let Some(last) = report.losses.last() {
            info!("backbone pretrained, final minibatch loss {last:.1}");
        }
        Self::with_backbone(cfg, theta)
    }

    /// Assemble the world around an existing backbone.
    pub fn with_backbone(cfg: &StudyConfig, theta: ToyUnet) -> Result<Self> {
        let backend = AutoencoderBackend::analytic(2, 3)?;
        let target = encode_target(&generate_pattern(&cfg.pattern)?, &backend)?;
        Ok(Self {
            backend,
            sched: NoiseSchedule::default(),
            theta,
            images: generate_images(&cfg.dataset)?,
            target,
        })
    }

    /// Protected and held-out images of one identity.
    pub fn identity(&self, group: usize, protected: usize) -> (Vec<ImageTensor>, Vec<ImageTensor>) {
        let members: Vec<ToyImage> = self.images.iter().filter(|i| i.group == group).cloned().collect();
        let (p, h) = split_protected(&members, protected);
        (p.into_iter().map(|i| i.image).collect(), h.into_iter().map(|i| i.image).collect())
    }
}

/// Clean-victim measurements on the held-out images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VictimScores {
    /// Mean over held-out images of the sampling-error norm.
    pub eta_norm: f64,
    /// Mean MS-SSIM between SDEdit outputs and their inputs.
    pub sdedit_ms_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub adversarial: Vec<ImageTensor>,
    /// `eps_adv[k][i]`: probe `k`, protected image `i`.
    pub eps_adv: Vec<Vec<Tensor3>>,
    /// Cosine protocol of eps_adv against the victim's sampling bias, per probe.
    pub eps_adv_vs_sampling_bias: Vec<f64>,
    /// Mean pairwise cosine of the eps_adv fields, per probe.
    pub eps_adv_consistency: Vec<f64>,
    /// Per reverse-bias image: cosine with eps_adv averaged over probes.
    pub reverse_bias_cosines: Vec<f64>,
    pub victim: VictimScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityResult {
    pub group: usize,
    pub clean: VictimScores,
    pub variants: Vec<VariantResult>,
}

impl IdentityResult {
    pub fn variant(&self, v: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|r| r.variant == v)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Sampling-bias fields `[probe][holdout image]`.
fn sampling_bias_fields<M: EpsilonModel>(
    model: &M,
    holdout: &[ImageTensor],
    cfg: &StudyConfig,
    world: &ToyWorld,
) -> Result<Vec<Vec<Tensor3>>> {
    cfg.probes
        .iter()
        .map(|&t| {
            holdout
                .iter()
                .enumerate()
                .map(|(j, x)| {
                    let seed = derive_indexed(cfg.seed, "sampling-bias", j as u64);
                    Ok(estimate_sampling_bias(model, x, t, cfg.analysis_mc, IDENTITY_COND, &world.backend, &world.sched, seed)?.data)
                })
                .collect()
        })
        .collect()
}

fn eta_norm(fields: &[Vec<Tensor3>], cfg: &StudyConfig, sched: &NoiseSchedule) -> f64 {
    let n = fields.first().map_or(0, |f| f.len());
    let norms: Vec<f64> = (0..n)
        .map(|j| {
            let mut acc = fields[0][j].scale(0.0);
            for (k, &t) in cfg.probes.iter().enumerate() {
                acc.axpy(sched.beta(t), &fields[k][j]);
            }
            acc.norm()
        })
        .collect();
    mean(&norms)
}

fn sdedit_fidelity<M: EpsilonModel>(model: &M, holdout: &[ImageTensor], cfg: &StudyConfig, world: &ToyWorld) -> Result<f64> {
    let (h, w, _) = holdout[0].shape();
    let ms = MsSsimConfig::for_size(h.min(w));
    let mut scores = Vec::with_capacity(holdout.len());
    for (j, x) in holdout.iter().enumerate() {
        let seed = derive_indexed(cfg.seed, "sdedit", j as u64);
        let out = sdedit(
            model,
            &world.backend,
            &world.sched,
            x,
            cfg.sdedit_strength,
            Some(cfg.sdedit_steps),
            IDENTITY_COND,
            seed,
        )?;
        scores.push(ms_ssim(&out, x, &ms)?);
    }
    Ok(mean(&scores))
}

/// Finetune a victim on `train` and score it on `holdout`.
pub fn score_victim<M: EpsilonModel>(
    base: &M,
    train: &[ImageTensor],
    holdout: &[ImageTensor],
    cfg: &StudyConfig,
    world: &ToyWorld,
) -> Result<(M, Vec<Vec<Tensor3>>, VictimScores)> {
    let data: Vec<_> = train.iter().map(|x| (x.clone(), IDENTITY_COND)).collect();
    let (model, _) = finetune(base, &data, &cfg.victim, &world.backend, &world.sched, derive_seed(cfg.seed, "victim"))?;
    let fields = sampling_bias_fields(&model, holdout, cfg, world)?;
    let scores = VictimScores {
        eta_norm: eta_norm(&fields, cfg, &world.sched),
        sdedit_ms_ssim: sdedit_fidelity(&model, holdout, cfg, world)?,
    };
    Ok((model, fields, scores))
}

/// Protect `images` with one variant; returns 8-bit adversarial images.
pub fn protect(images: &[ImageTensor], variant: Variant, cfg: &StudyConfig, world: &ToyWorld, group: usize) -> Result<Vec<ImageTensor>> {
    let mut obj = variant.objective(&world.target.latent);
    obj.mc = cfg.objective_mc;
    let attack = AttackConfig {
        budget: variant.budget(&cfg.budget),
        finetune: cfg.attack_finetune.clone(),
        ..Default::default()
    };
    let data: Vec<_> = images.iter().map(|x| (x.clone(), IDENTITY_COND)).collect();
    let seed = derive_indexed(cfg.seed, &format!("attack-{}", variant.name()), group as u64);
    let run = run_attack(&data, &world.theta, &obj, &attack, &world.backend, &world.sched, seed)?;
    run.examples
        .iter()
        .map(|e| export_8bit(&e.x_adv, &e.x_clean, cfg.budget.zeta))
        .collect()
}

pub fn run_identity(world: &ToyWorld, cfg: &StudyConfig, group: usize) -> Result<IdentityResult> {
    let (protected, holdout) = world.identity(group, cfg.protected);
    let (theta_star, _, clean) = score_victim(&world.theta, &protected, &holdout, cfg, world)?;
    info!("identity {group}: clean victim eta {:.4}", clean.eta_norm);
    let mut variants = Vec::new();
    for &variant in &cfg.variants {
        let adversarial = protect(&protected, variant, cfg, world, group)?;
        let (phi, bspl, victim) = score_victim(&world.theta, &adversarial, &holdout, cfg, world)?;
        let mut eps_adv = Vec::with_capacity(cfg.probes.len());
        let mut vs_bspl = Vec::new();
        let mut consistency = Vec::new();
        for (k, &t) in cfg.probes.iter().enumerate() {
            let fields: Vec<Tensor3> = protected
                .iter()
                .zip(&adversarial)
                .enumerate()
                .map(|(i, (x, xa))| {
                    let seed = derive_indexed(cfg.seed, "eps-adv", i as u64);
                    Ok(estimate_eps_adv(&world.theta, x, xa, t, cfg.analysis_mc, IDENTITY_COND, &world.backend, &world.sched, seed)?.data)
                })
                .collect::<Result<_>>()?;
            let a: Vec<&Tensor3> = fields.iter().collect();
            let b: Vec<&Tensor3> = bspl[k].iter().collect();
            vs_bspl.push(cosine_protocol(&a, &b)?.mean);
            consistency.push(mean_pairwise_cosine(&a)?.mean);
            eps_adv.push(fields);
        }
        let mut reverse_bias_cosines = Vec::new();
        for i in 0..cfg.reverse_bias_images.min(protected.len()) {
            let mut c = Vec::new();
            for (k, &t) in cfg.probes.iter().enumerate() {
                let seed = derive_indexed(cfg.seed, "reverse-bias", i as u64);
                let bx = estimate_reverse_bias(
                    &world.theta,
                    &theta_star,
                    &phi,
                    &protected[i],
                    &adversarial[i],
                    t,
                    cfg.analysis_mc,
                    IDENTITY_COND,
                    &world.backend,
                    &world.sched,
                    seed,
                )?;
                if let Some(v) = cosine(&bx.data, &eps_adv[k][i]) {
                    c.push(v);
                }
            }
            reverse_bias_cosines.push(mean(&c));
        }
        info!(
            "identity {group} {}: cos(eps_adv, B_spl) {:.4}, consistency {:.4}, eta {:.4}",
            variant.name(),
            mean(&vs_bspl),
            mean(&consistency),
            victim.eta_norm
        );
        variants.push(VariantResult {
            variant,
            adversarial,
            eps_adv,
            eps_adv_vs_sampling_bias: vs_bspl,
            eps_adv_consistency: consistency,
            reverse_bias_cosines,
            victim,
        });
    }
    Ok(IdentityResult {
        group,
        clean,
        variants,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub identities: Vec<IdentityResult>,
}

/// Aggregates over identities for one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub eps_adv_vs_sampling_bias: f64,
    pub eps_adv_consistency: f64,
    pub reverse_bias_cosines: Vec<f64>,
    pub eta_norm: f64,
    pub sdedit_ms_ssim: f64,
}

impl StudyReport {
    pub fn summary(&self, v: Variant) -> Option<VariantSummary> {
        let rs: Vec<&VariantResult> = self.identities.iter().filter_map(|r| r.variant(v)).collect();
        if rs.is_empty() {
            return None;
        }
        let avg = |f: &dyn Fn(&VariantResult) -> f64| mean(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
        Some(VariantSummary {
            eps_adv_vs_sampling_bias: avg(&|r| mean(&r.eps_adv_vs_sampling_bias)),
            eps_adv_consistency: avg(&|r| mean(&r.eps_adv_consistency)),
            reverse_bias_cosines: rs.iter().flat_map(|r| r.reverse_bias_cosines.iter().copied()).collect(),
            eta_norm: avg(&|r| r.victim.eta_norm),
            sdedit_ms_ssim: avg(&|r| r.victim.sdedit_ms_ssim),
        })
    }

    pub fn clean(&self) -> VictimScores {
        let n = self.identities.len().max(1) as f64;
        VictimScores {
            eta_norm: self.identities.iter().map(|r| r.clean.eta_norm).sum::<f64>() / n,
            sdedit_ms_ssim: self.identities.iter().map(|r| r.clean.sdedit_ms_ssim).sum::<f64>() / n,
        }
    }

    /// Mean pairwise eps_adv cosine over the first `n` examples pooled
    /// across identities, averaged over probes.
    pub fn pooled_consistency(&self, v: Variant, n: usize) -> Result<f64> {
        let rs: Vec<&VariantResult> = self.identities.iter().filter_map(|r| r.variant(v)).collect();
        let probes = rs.first().map_or(0, |r| r.eps_adv.len());
        let mut per_probe = Vec::with_capacity(probes);
        for k in 0..probes {
            let pool: Vec<&Tensor3> = rs.iter().flat_map(|r| r.eps_adv[k].iter()).take(n).collect();
            per_probe.push(mean_pairwise_cosine(&pool)?.mean);
        }
        Ok(mean(&per_probe))
    }
}

pub fn run_study(world: &ToyWorld, cfg: &StudyConfig) -> Result<StudyReport> {
    let groups: Vec<usize> = if cfg.groups.is_empty() {
        (0..cfg.dataset.groups).collect()
    } else {
        cfg.groups.clone()
    };
    let identities = groups
        .into_iter()
        .map(|g| run_identity(world, cfg, g))
        .collect::<Result<_>>()?;
    Ok(StudyReport { identities })
}

/// Clean and protected victim scores when the protected images (crafted
/// against another backbone) are used to personalize `backbone`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub group: usize,
    pub clean: VictimScores,
    pub protected: VictimScores,
}

pub fn run_transfer(
    world: &ToyWorld,
    backbone: &ToyUnet,
    report: &StudyReport,
    variant: Variant,
    cfg: &StudyConfig,
) -> Result<Vec<TransferResult>> {
    let target_world = ToyWorld {
        theta: backbone.clone(),
        ..world.clone()
    };
    let mut out = Vec::new();
    for r in &report.identities {
        let Some(v) = r.variant(variant) else { continue };
        let (protected, holdout) = world.identity(r.group, cfg.protected);
        let (_, _, clean) = score_victim(backbone, &protected, &holdout, cfg, &target_world)?;
        let (_, _, prot) = score_victim(backbone, &v.adversarial, &holdout, cfg, &target_world)?;
        out.push(TransferResult {
            group: r.group,
            clean,
            protected: prot,
        });
    }
    Ok(out)
}

/// Per-variant table of the headline numbers, keyed by variant name.
pub fn summary_table(report: &StudyReport) -> BTreeMap<String, VariantSummary> {
    [Variant::Ace, Variant::Advdm, Variant::Aspl]
        .into_iter()
        .filter_map(|v| report.summary(v).map(|s| (v.name().to_string(), s)))
        .collect()
}
