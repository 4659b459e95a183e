//! Full toy protection study: every identity, every attack variant.
//!
//! Pass a checkpoint path to reuse a pretrained backbone across runs; it is
//! created on first use. Set `GROUPS=0,1` to restrict the identities.

use std::path::PathBuf;
use std::time::Instant;

use acelab::io::{load_checkpoint, save_checkpoint};
use acelab::study::{run_study, summary_table, StudyConfig, ToyWorld};

fn main() -> acelab::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut cfg = StudyConfig::default();
    if let Ok(g) = std::env::var("GROUPS") {
        cfg.groups = g.split(',').filter_map(|s| s.trim().parse().ok()).collect();
    }
    let start = Instant::now();
    let world = match std::env::args().nth(1).map(PathBuf::from) {
        Some(path) if path.exists() => ToyWorld::with_backbone(&cfg, load_checkpoint(&path)?.model)?,
        Some(path) => {
            let world = ToyWorld::build(&cfg)?;
            save_checkpoint(&world.theta, &world.sched, &world.backend, &path)?;
            world
        }
        None => ToyWorld::build(&cfg)?,
    };
    let report = run_study(&world, &cfg)?;
    let clean = report.clean();
    println!("clean victim: eta {:.4}  sdedit ms-ssim {:.4}", clean.eta_norm, clean.sdedit_ms_ssim);
    for (name, s) in summary_table(&report) {
        println!(
            "{name:>6}: cos(eps_adv, B_spl) {:+.4}  consistency {:.4}  eta {:.4}  ms-ssim {:.4}  reverse-bias {:?}",
            s.eps_adv_vs_sampling_bias,
            s.eps_adv_consistency,
            s.eta_norm,
            s.sdedit_ms_ssim,
            s.reverse_bias_cosines.iter().map(|c| format!("{c:+.3}")).collect::<Vec<_>>()
        );
    }
    println!("done in {:.0}s", start.elapsed().as_secs_f64());
    Ok(())
}
