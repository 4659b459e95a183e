//! Apply each purification in the default grid to a perturbed image and
//! measure how much of the perturbation survives.

mod common;

use rand::Rng;

use acelab::dataset::{generate_images, ToyDatasetSpec};
use acelab::defenses::{default_grid, purify_with, DefenseRegistry};
use acelab::io::write_png;
use acelab::metrics::{ms_ssim, MsSsimConfig};
use acelab::rng::rng_from;
use acelab::tensor::{ImageTensor, Tensor3};

fn main() -> acelab::Result<()> {
    let out = common::out_dir("purification");
    let x = generate_images(&ToyDatasetSpec::default())?.remove(0).image;
    let mut rng = rng_from(4);
    let (h, w, c) = x.shape();
    let delta = Tensor3::from_fn(h, w, c, |_, _, _| if rng.random::<bool>() { 4.0 / 255.0 } else { -4.0 / 255.0 });
    let x_adv = ImageTensor::from_clamped(x.add(&delta));
    let registry = DefenseRegistry::with_toy_sr();
    let ssim = MsSsimConfig::for_size(h);
    println!("{:<14} {:>10} {:>10} {:>14}", "defense", "ms-ssim", "vs clean", "residual l2");
    for spec in default_grid() {
        let p = purify_with(&x_adv, &spec, 0, &registry)?;
        let clean_p = purify_with(&x, &spec, 0, &registry)?;
        println!(
            "{:<14} {:>10.4} {:>10.4} {:>14.4}",
            spec.label(),
            ms_ssim(&x_adv, &p, &ssim)?,
            ms_ssim(&x, &p, &ssim)?,
            p.sub(&clean_p).norm()
        );
        write_png(&p, &out.join(format!("{}.png", spec.label().replace([':', ' '], "_"))))?;
    }
    println!("input perturbation l2 {:.4}", x_adv.sub(&x).norm());
    Ok(())
}
