//! Procedural toy dataset: shape-and-stripe compositions grouped into
//! identities.
//!
//! Each identity fixes a palette, a foreground shape and a stripe band; the
//! images of one identity differ by placement, scale, lighting and a little
//! pixel noise.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_png, write_png};
use crate::rng::{derive_indexed, rng_from};
use crate::tensor::{ImageTensor, Tensor3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyDatasetSpec {
    pub groups: usize,
    pub per_group: usize,
    pub size: usize,
    /// Per-pixel Gaussian noise, in [0, 1] units.
    pub pixel_noise: f64,
    /// Maximum placement jitter as a fraction of the image size.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            groups: 5,
            per_group: 20,
            size: 32,
            pixel_noise: 0.02,
            jitter: 0.04,
            seed: 0,
        }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.per_group == 0 {
            return Err(Error::Config("dataset needs at least one group and one image".into()));
        }
        if self.size < 8 || !self.size.is_multiple_of(4) {
            return Err(Error::Config(format!("image size must be a multiple of 4 and >= 8, got {}", self.size)));
        }
        if !(self.pixel_noise >= 0.0 && self.jitter >= 0.0 && self.jitter < 0.5) {
            return Err(Error::Config("pixel_noise must be >= 0 and jitter in [0, 0.5)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disc,
    Square,
    Diamond,
}

#[derive(Clone, Debug)]
struct Identity {
    background: [f64; 3],
    foreground: [f64; 3],
    stripe: [f64; 3],
    shape: Shape,
    radius: f64,
    stripe_period: f64,
    stripe_angle: f64,
    /// Stripe band position along y as a fraction of the size.
    band: (f64, f64),
}

fn color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
}

impl Identity {
    fn sample<R: Rng>(rng: &mut R, index: usize) -> Self {
        let shape = [Shape::Disc, Shape::Square, Shape::Diamond][index % 3];
        let top = rng.random_range(0.0..0.4);
        Self {
            background: color(rng),
            foreground: color(rng),
            stripe: color(rng),
            shape,
            radius: rng.random_range(0.18..0.3),
            stripe_period: rng.random_range(3.0..7.0),
            stripe_angle: rng.random_range(0.0..std::f64::consts::PI),
            band: (top, top + rng.random_range(0.25..0.5)),
        }
    }

    fn inside(&self, dx: f64, dy: f64, r: f64) -> bool {
        match self.shape {
            Shape::Disc => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs().max(dy.abs()) <= r,
            Shape::Diamond => dx.abs() + dy.abs() <= 1.3 * r,
        }
    }

    fn render<R: Rng>(&self, size: usize, spec: &ToyDatasetSpec, rng: &mut R) -> ImageTensor {
        let s = size as f64;
        let j = spec.jitter;
        let (cx, cy) = (0.5 + rng.random_range(-j..=j), 0.5 + rng.random_range(-j..=j));
        let r = self.radius * rng.random_range(0.85..1.15);
        let gain = rng.random_range(0.85..1.15);
        let phase = rng.random_range(0.0..self.stripe_period);
        let (sa, ca) = self.stripe_angle.sin_cos();
        let noise = Normal::new(0.0, spec.pixel_noise.max(f64::MIN_POSITIVE)).expect("valid std");
        let t = Tensor3::from_fn(size, size, 3, |y, x, c| {
            let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let base = if self.inside(u - cx, v - cy, r) {
                self.foreground[c]
            } else if v >= self.band.0 && v < self.band.1 && ((x as f64 * ca + y as f64 * sa + phase) / self.stripe_period).rem_euclid(1.0) < 0.5 {
                self.stripe[c]
            } else {
                self.background[c]
            };
            let n = if spec.pixel_noise > 0.0 { noise.sample(rng) } else { 0.0 };
            base * gain + n
        });
        ImageTensor::from_clamped(t).quantize_8bit()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    pub image: ImageTensor,
    pub group: usize,
    pub index: usize,
}

/// Images ordered by group, then by index within the group.
pub fn generate_images(spec: &ToyDatasetSpec) -> Result<Vec<ToyImage>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.groups * spec.per_group);
    for g in 0..spec.groups {
        let id = Identity::sample(&mut rng_from(derive_indexed(spec.seed, "identity", g as u64)), g);
        let mut rng = rng_from(derive_indexed(spec.seed, "identity-images", g as u64));
        for i in 0..spec.per_group {
            out.push(ToyImage {
                image: id.render(spec.size, spec, &mut rng),
                group: g,
                index: i,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub spec: ToyDatasetSpec,
    pub entries: Vec<DatasetEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub file: String,
    pub group: usize,
    pub index: usize,
    pub sha256: String,
}

pub const INDEX_FILE: &str = "index.json";

/// Write `group_XX/img_YY.png` files and an index under `dir`.
pub fn generate_dataset(spec: &ToyDatasetSpec, dir: &Path) -> Result<DatasetIndex> {
    let images = generate_images(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(images.len());
    for img in &images {
        let file = format!("group_{:02}/img_{:02}.png", img.group, img.index);
        let path = dir.join(&file);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let sha256 = write_png(&img.image, &path)?;
        entries.push(DatasetEntry {
            file,
            group: img.group,
            index: img.index,
            sha256,
        });
    }
    let index = DatasetIndex {
        spec: spec.clone(),
        entries,
    };
    let path = dir.join(INDEX_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// Read back a dataset written by [`generate_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<ToyImage>> {
    let path = dir.join(INDEX_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex = serde_json::from_slice(&bytes)?;
    index
        .entries
        .iter()
        .map(|e| {
            Ok(ToyImage {
                image: read_png(&dir.join(&e.file))?,
                group: e.group,
                index: e.index,
            })
        })
        .collect()
}

/// Split each group into the first `protected` images and the rest.
pub fn split_protected(images: &[ToyImage], protected: usize) -> (Vec<ToyImage>, Vec<ToyImage>) {
    images.iter().cloned().partition(|im| im.index < protected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_and_range() {
        let spec = ToyDatasetSpec::default();
        let imgs = generate_images(&spec).unwrap();
        assert_eq!(imgs.len(), 100);
        for g in 0..5 {
            assert_eq!(imgs.iter().filter(|i| i.group == g).count(), 20);
        }
        for im in &imgs {
            assert_eq!(im.image.shape(), (32, 32, 3));
            assert!(im.image.min() >= 0.0 && im.image.max() <= 1.0);
            assert_eq!(im.image.quantize_8bit(), im.image);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = ToyDatasetSpec {
            per_group: 3,
            ..Default::default()
        };
        assert_eq!(generate_images(&spec).unwrap(), generate_images(&spec).unwrap());
        let other = ToyDatasetSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate_images(&spec).unwrap(), generate_images(&other).unwrap());
    }

    #[test]
    fn identities_are_closer_within_group() {
        let imgs = generate_images(&ToyDatasetSpec::default()).unwrap();
        let dist = |a: &ToyImage, b: &ToyImage| a.image.sub(&b.image).norm();
        let (mut within, mut across, mut nw, mut na) = (0.0, 0.0, 0, 0);
        for (i, a) in imgs.iter().enumerate() {
            for b in &imgs[i + 1..] {
                if a.group == b.group {
                    within += dist(a, b);
                    nw += 1;
                } else {
                    across += dist(a, b);
                    na += 1;
                }
            }
        }
        assert!(within / (nw as f64) < across / (na as f64));
    }

    #[test]
    fn split_keeps_group_structure() {
        let imgs = generate_images(&ToyDatasetSpec::default()).unwrap();
        let (p, h) = split_protected(&imgs, 10);
        assert_eq!((p.len(), h.len()), (50, 50));
        assert!(p.iter().all(|i| i.index < 10) && h.iter().all(|i| i.index >= 10));
    }

    #[test]
    fn rejects_bad_specs() {
        for spec in [
            ToyDatasetSpec { groups: 0, ..Default::default() },
            ToyDatasetSpec { size: 30, ..Default::default() },
            ToyDatasetSpec { jitter: 0.6, ..Default::default() },
        ] {
            assert!(generate_images(&spec).is_err());
        }
    }
}
