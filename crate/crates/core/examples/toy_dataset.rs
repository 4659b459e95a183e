//! Generate the procedural identity dataset and the target patterns.

mod common;

use acelab::autoencoder::AutoencoderBackend;
use acelab::dataset::{generate_dataset, ToyDatasetSpec};
use acelab::io::write_png;
use acelab::patterns::{encode_target, generate_pattern, sign_alternations, PatternKind, PatternSpec};

fn main() -> acelab::Result<()> {
    let out = common::out_dir("toy_dataset");
    let spec = ToyDatasetSpec {
        groups: 3,
        per_group: 4,
        ..Default::default()
    };
    let index = generate_dataset(&spec, &out.join("dataset"))?;
    for e in index.entries.iter().take(4) {
        println!("{e:?}");
    }
    println!("{} images in {}", index.entries.len(), out.join("dataset").display());

    let backend = AutoencoderBackend::analytic(2, 3)?;
    for kind in [PatternKind::Stripes, PatternKind::Checker, PatternKind::GlyphTile] {
        for repetition in [2, 8] {
            let spec = PatternSpec {
                kind,
                repetition,
                ..Default::default()
            };
            let img = generate_pattern(&spec)?;
            let target = encode_target(&img, &backend)?;
            let name = format!("{kind:?}_{repetition}.png").to_lowercase();
            write_png(&img, &out.join(&name))?;
            let alternations: usize = sign_alternations(&target.latent).iter().sum();
            println!("{name:<18} latent sign alternations {alternations:>4}  hash {}", &target.hash[..12]);
        }
    }
    Ok(())
}
