//! Protect two images with each attack objective and compare the result.

mod common;

use acelab::attack::{run_attack, AttackBudget, AttackConfig, AttackObjective};
use acelab::dataset::{generate_images, ToyDatasetSpec};
use acelab::finetune::FinetuneConfig;
use acelab::io::write_png;
use acelab::nn::{MemoryMode, OptimizerKind};
use acelab::patterns::{encode_target, generate_pattern, PatternSpec};
use acelab::recipe::IDENTITY_COND;

fn main() -> acelab::Result<()> {
    let q = common::quick_backbone(300)?;
    let out = common::out_dir("attack_compare");
    let images: Vec<_> = generate_images(&ToyDatasetSpec::default())?
        .into_iter()
        .take(2)
        .map(|im| (im.image, IDENTITY_COND))
        .collect();
    let target = encode_target(&generate_pattern(&PatternSpec::default())?, &q.backend)?.latent;
    let cfg = AttackConfig {
        budget: AttackBudget {
            epochs: 2,
            pgd_steps: 5,
            finetune_steps: 3,
            ..Default::default()
        },
        finetune: FinetuneConfig {
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
            batch: 2,
            ..Default::default()
        },
        memory: MemoryMode::Recompute,
    };
    let objectives = [
        ("ace", AttackObjective::ace(target.clone())),
        ("ace-plus", AttackObjective::ace_plus(target.clone(), 0.5)),
        ("advdm", AttackObjective::advdm()),
        ("encoder", AttackObjective::encoder_target(target)),
    ];
    for (name, obj) in objectives {
        let run = run_attack(&images, &q.theta, &obj, &cfg, &q.backend, &q.sched, 7)?;
        for (i, e) in run.examples.iter().enumerate() {
            let trace = &e.trace;
            println!(
                "{name:<9} image {i}: linf*255 {:.2}  objective {:.4} -> {:.4}",
                e.linf * 255.0,
                trace[0],
                trace[trace.len() - 1]
            );
            write_png(&e.x_adv, &out.join(format!("{name}_{i}.png")))?;
        }
        println!("{name:<9} peak activations {} KiB", run.counters.peak_activation_bytes / 1024);
    }
    Ok(())
}
