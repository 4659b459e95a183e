//! Personalize the backbone on one identity with low-rank adapters, then
//! sample from the adapted model.

mod common;

use acelab::dataset::{generate_images, ToyDatasetSpec};
use acelab::diffusion::sample;
use acelab::finetune::{finetune, FinetuneConfig};
use acelab::io::{save_adapters, write_png};
use acelab::nn::OptimizerKind;
use acelab::recipe::IDENTITY_COND;

fn main() -> acelab::Result<()> {
    let q = common::quick_backbone(300)?;
    let out = common::out_dir("finetune_and_sample");
    let train: Vec<_> = generate_images(&ToyDatasetSpec::default())?
        .into_iter()
        .filter(|im| im.group == 0)
        .take(6)
        .map(|im| (im.image, IDENTITY_COND))
        .collect();
    let cfg = FinetuneConfig {
        steps: 100,
        lr: 1e-3,
        optimizer: OptimizerKind::adam(),
        batch: 4,
        ..Default::default()
    };
    let (phi, report) = finetune(&q.theta, &train, &cfg, &q.backend, &q.sched, 3)?;
    for (i, chunk) in report.losses.chunks(25).enumerate() {
        println!("steps {:>3}..{:>3}: mean loss {:.4}", i * 25, i * 25 + chunk.len(), chunk.iter().sum::<f64>() / chunk.len() as f64);
    }
    let hash = save_adapters(&phi, &q.sched, &q.backend, &out.join("adapters.ckpt"))?;
    println!("adapters saved, sha256 {}", &hash[..16]);

    let hw = (train[0].0.height() / 2, train[0].0.width() / 2);
    for i in 0..3 {
        let z = sample(&phi, &q.sched, 50, IDENTITY_COND, hw, 100 + i)?;
        write_png(&q.backend.decode(&z)?, &out.join(format!("sample_{i}.png")))?;
    }
    println!("samples written to {}", out.display());
    Ok(())
}
