//! Shared setup for the examples: a quickly pretrained backbone and an
//! output directory.

use std::path::PathBuf;

use acelab::autoencoder::AutoencoderBackend;
use acelab::dataset::ToyDatasetSpec;
use acelab::recipe::{pretrain_backbone, PretrainConfig};
use acelab::schedule::NoiseSchedule;
use acelab::unet::ToyUnet;

#[allow(dead_code)]
pub struct Quick {
    pub backend: AutoencoderBackend,
    pub sched: NoiseSchedule,
    pub theta: ToyUnet,
}

/// A backbone good enough to show the mechanics, in a few seconds.
#[allow(dead_code)]
pub fn quick_backbone(steps: usize) -> acelab::Result<Quick> {
    let backend = AutoencoderBackend::analytic(2, 3)?;
    let sched = NoiseSchedule::default();
    let cfg = PretrainConfig {
        dataset: ToyDatasetSpec {
            groups: 6,
            per_group: 4,
            seed: 1000,
            ..Default::default()
        },
        steps,
        ..Default::default()
    };
    let (theta, report) = pretrain_backbone(&cfg, &backend, &sched)?;
    let first = report.losses.first().copied().unwrap_or(f64::NAN);
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    println!("pretrained {steps} steps: loss {first:.4} -> {last:.4}");
    Ok(Quick { backend, sched, theta })
}

/// `target/examples-out/<name>`, created.
pub fn out_dir(name: &str) -> PathBuf {
    let dir = PathBuf::from("target/examples-out").join(name);
    std::fs::create_dir_all(&dir).expect("create example output directory");
    dir
}
