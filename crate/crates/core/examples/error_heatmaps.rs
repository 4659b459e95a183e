//! Estimate the score-function error an attack induces, compare it with the
//! sampling bias of a personalized model and render both as heatmaps.

mod common;

use acelab::analysis::{estimate_eps_adv, estimate_sampling_bias, heatmap, mean_pairwise_cosine, PROBE_TIMESTEPS};
use acelab::attack::{run_attack, AttackBudget, AttackConfig, AttackObjective};
use acelab::dataset::{generate_images, ToyDatasetSpec};
use acelab::finetune::{finetune, FinetuneConfig};
use acelab::io::write_png;
use acelab::nn::OptimizerKind;
use acelab::patterns::{encode_target, generate_pattern, PatternSpec};
use acelab::recipe::IDENTITY_COND;
use acelab::tensor::cosine;

fn main() -> acelab::Result<()> {
    let q = common::quick_backbone(300)?;
    let out = common::out_dir("error_heatmaps");
    let group: Vec<_> = generate_images(&ToyDatasetSpec::default())?
        .into_iter()
        .filter(|im| im.group == 1)
        .map(|im| (im.image, IDENTITY_COND))
        .collect();
    let (protected, holdout) = group.split_at(4);
    let target = encode_target(&generate_pattern(&PatternSpec::default())?, &q.backend)?.latent;
    let cfg = AttackConfig {
        budget: AttackBudget {
            epochs: 2,
            pgd_steps: 5,
            finetune_steps: 0,
            ..Default::default()
        },
        ..Default::default()
    };
    let run = run_attack(protected, &q.theta, &AttackObjective::ace(target), &cfg, &q.backend, &q.sched, 1)?;
    let ft = FinetuneConfig {
        steps: 60,
        lr: 1e-3,
        optimizer: OptimizerKind::adam(),
        batch: 4,
        ..Default::default()
    };
    let adv: Vec<_> = run.examples.iter().map(|e| (e.x_adv.clone(), IDENTITY_COND)).collect();
    let (phi, _) = finetune(&q.theta, &adv, &ft, &q.backend, &q.sched, 2)?;

    for t in PROBE_TIMESTEPS {
        let fields = run
            .examples
            .iter()
            .map(|e| estimate_eps_adv(&q.theta, &e.x_clean, &e.x_adv, t, 16, IDENTITY_COND, &q.backend, &q.sched, t as u64))
            .collect::<acelab::Result<Vec<_>>>()?;
        let bias = estimate_sampling_bias(&phi, &holdout[0].0, t, 16, IDENTITY_COND, &q.backend, &q.sched, 9)?;
        let refs: Vec<_> = fields.iter().map(|f| &f.data).collect();
        let consistency = mean_pairwise_cosine(&refs)?;
        let vs_bias = cosine(&fields[0].data, &bias.data).unwrap_or(f64::NAN);
        println!(
            "t={t:>3}: |eps_adv| {:.3}  consistency {:.3}  cos(eps_adv, sampling bias) {vs_bias:+.3}",
            fields[0].norm(),
            consistency.mean
        );
        write_png(&heatmap(&fields[0].data), &out.join(format!("eps_adv_t{t}.png")))?;
        write_png(&heatmap(&bias.data), &out.join(format!("sampling_bias_t{t}.png")))?;
    }
    println!("heatmaps written to {}", out.display());
    Ok(())
}
