//! SDEdit a clean image at several strengths and score the edits.

mod common;

use acelab::dataset::{generate_images, ToyDatasetSpec};
use acelab::diffusion::sdedit;
use acelab::io::write_png;
use acelab::metrics::{clip_iqa, clip_sim, ms_ssim, MsSsimConfig, ProjectionProvider, NEGATIVE_PROMPT};
use acelab::recipe::IDENTITY_COND;

fn main() -> acelab::Result<()> {
    let q = common::quick_backbone(300)?;
    let out = common::out_dir("sdedit_quality");
    let x = generate_images(&ToyDatasetSpec::default())?.remove(0).image;
    let provider = ProjectionProvider::default();
    let ssim = MsSsimConfig::for_size(x.height());
    for strength in [0.1, 0.3, 0.5, 0.8] {
        let edit = sdedit(&q.theta, &q.backend, &q.sched, &x, strength, Some(50), IDENTITY_COND, 5)?;
        println!(
            "strength {strength:.1}: ms-ssim {:.4}  clip-iqa {:.4}  clip-sim {:.4}",
            ms_ssim(&x, &edit, &ssim)?,
            clip_iqa(std::slice::from_ref(&edit), NEGATIVE_PROMPT, &provider)?,
            clip_sim(&x, &edit, &provider)?
        );
        write_png(&edit, &out.join(format!("edit_{strength:.1}.png")))?;
    }
    Ok(())
}
