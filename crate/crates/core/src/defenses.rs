//! Purification defenses and the robustness harness that re-runs a victim
//! pipeline on purified adversarial examples.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::imageops::{self, FilterType};
use image::{ExtendedColorType, ImageBuffer, ImageFormat, Luma};
use log::warn;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffusion::sdedit;
use crate::error::{Error, Result};
use crate::metrics::{ms_ssim, MsSsimConfig};
use crate::recipe::IDENTITY_COND;
use crate::rng::{derive_indexed, rng_from};
use crate::study::{score_victim, StudyConfig, ToyWorld};
use crate::tensor::{ImageTensor, Tensor3};

/// Name under which the bundled toy super-resolution provider registers.
pub const TOY_SR: &str = "toy-sr";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DefenseSpec {
    /// Additive Gaussian noise, `sigma` in 8-bit units.
    Gaussian { sigma: f64 },
    Jpeg { quality: u8 },
    /// Bicubic resize by `factor`, then back to the original size.
    Resize { factor: f64 },
    /// Half-resolution downscale recovered by a registered SR provider.
    Sr { provider: String },
}

impl DefenseSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Gaussian { sigma } if !(*sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::Config(format!("gaussian sigma must be >= 0, got {sigma}")))
            }
            Self::Jpeg { quality } if !(1..=100).contains(quality) => {
                Err(Error::Config(format!("jpeg quality must be in 1..=100, got {quality}")))
            }
            Self::Resize { factor } if !(*factor > 0.0 && factor.is_finite()) => {
                Err(Error::Config(format!("resize factor must be > 0, got {factor}")))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Gaussian { sigma } => format!("gaussian-{sigma}"),
            Self::Jpeg { quality } => format!("jpeg-{quality}"),
            Self::Resize { factor } => format!("resize-{factor}x"),
            Self::Sr { provider } => format!("sr-{provider}"),
        }
    }
}

/// The seven-configuration grid: two noise levels, two JPEG qualities, two
/// resize factors and super-resolution.
pub fn default_grid() -> Vec<DefenseSpec> {
    vec![
        DefenseSpec::Gaussian { sigma: 4.0 },
        DefenseSpec::Gaussian { sigma: 8.0 },
        DefenseSpec::Jpeg { quality: 20 },
        DefenseSpec::Jpeg { quality: 70 },
        DefenseSpec::Resize { factor: 2.0 },
        DefenseSpec::Resize { factor: 0.5 },
        DefenseSpec::Sr {
            provider: TOY_SR.into(),
        },
    ]
}

/// Upscales an image by an integer factor.
pub trait SuperResolution: Send + Sync {
    fn upscale(&self, x: &ImageTensor, factor: usize) -> Result<ImageTensor>;
}

/// Bicubic upscaling followed by an unsharp mask.
#[derive(Clone, Debug)]
pub struct SharpenSr {
    pub amount: f64,
}

impl Default for SharpenSr {
    fn default() -> Self {
        Self { amount: 0.5 }
    }
}

impl SuperResolution for SharpenSr {
    fn upscale(&self, x: &ImageTensor, factor: usize) -> Result<ImageTensor> {
        let (h, w, _) = x.shape();
        let up = resize_bicubic(x.tensor(), h * factor, w * factor);
        let blurred = box_blur3(&up);
        Ok(ImageTensor::from_clamped(up.zip_map(&blurred, |u, b| u + self.amount * (u - b))))
    }
}

/// Named super-resolution providers.
#[derive(Default)]
pub struct DefenseRegistry {
    sr: BTreeMap<String, Box<dyn SuperResolution>>,
}

impl DefenseRegistry {
    /// A registry holding the bundled toy provider.
    pub fn with_toy_sr() -> Self {
        let mut r = Self::default();
        r.register_sr(TOY_SR, Box::new(SharpenSr::default()));
        r
    }

    pub fn register_sr(&mut self, name: &str, provider: Box<dyn SuperResolution>) {
        self.sr.insert(name.to_string(), provider);
    }

    pub fn sr(&self, name: &str) -> Result<&dyn SuperResolution> {
        self.sr
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::DefenseUnavailable(format!("no super-resolution provider `{name}` registered")))
    }
}

fn channel_buffer(t: &Tensor3, ch: usize) -> ImageBuffer<Luma<f32>, Vec<f32>> {
    let (h, w, _) = t.shape();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([t.get(y as usize, x as usize, ch) as f32]))
}

/// Per-channel Catmull-Rom (bicubic) resampling; values are not clamped.
pub fn resize_bicubic(t: &Tensor3, h: usize, w: usize) -> Tensor3 {
    let (_, _, c) = t.shape();
    let planes: Vec<_> = (0..c)
        .map(|ch| imageops::resize(&channel_buffer(t, ch), w as u32, h as u32, FilterType::CatmullRom))
        .collect();
    Tensor3::from_fn(h, w, c, |y, x, ch| planes[ch].get_pixel(x as u32, y as u32)[0] as f64)
}

fn box_blur3(t: &Tensor3) -> Tensor3 {
    let (h, w, c) = t.shape();
    Tensor3::from_fn(h, w, c, |y, x, ch| {
        let (mut s, mut n) = (0.0, 0.0);
        for yy in y.saturating_sub(1)..(y + 2).min(h) {
            for xx in x.saturating_sub(1)..(x + 2).min(w) {
                s += t.get(yy, xx, ch);
                n += 1.0;
            }
        }
        s / n
    })
}

fn jpeg_roundtrip(x: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    let (h, w, c) = x.shape();
    let color = match c {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        _ => return Err(Error::invalid(format!("jpeg needs 1 or 3 channels, got {c}"))),
    };
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode(&x.to_u8(), w as u32, h as u32, color)?;
    let decoded = image::load(Cursor::new(buf), ImageFormat::Jpeg)?;
    let bytes = if c == 1 {
        decoded.into_luma8().into_raw()
    } else {
        decoded.into_rgb8().into_raw()
    };
    ImageTensor::from_u8(h, w, c, &bytes)
}

/// Purify with no super-resolution provider available.
pub fn purify(x: &ImageTensor, spec: &DefenseSpec, seed: u64) -> Result<ImageTensor> {
    purify_with(x, spec, seed, &DefenseRegistry::default())
}

pub fn purify_with(x: &ImageTensor, spec: &DefenseSpec, seed: u64, registry: &DefenseRegistry) -> Result<ImageTensor> {
    spec.validate()?;
    let (h, w, _) = x.shape();
    match spec {
        DefenseSpec::Gaussian { sigma } => {
            if *sigma == 0.0 {
                return Ok(x.clone());
            }
            let normal = Normal::new(0.0, sigma / 255.0).expect("valid std");
            let mut rng = rng_from(seed);
            let (h, w, c) = x.shape();
            let noisy: Vec<f64> = x.as_slice().iter().map(|v| v + normal.sample(&mut rng)).collect();
            Ok(ImageTensor::from_clamped(Tensor3::from_vec(h, w, c, noisy)?))
        }
        DefenseSpec::Jpeg { quality } => jpeg_roundtrip(x, *quality),
        DefenseSpec::Resize { factor } => {
            let sh = ((h as f64 * factor).round() as usize).max(1);
            let sw = ((w as f64 * factor).round() as usize).max(1);
            let scaled = resize_bicubic(x.tensor(), sh, sw);
            Ok(ImageTensor::from_clamped(resize_bicubic(&scaled, h, w)))
        }
        DefenseSpec::Sr { provider } => {
            let sr = registry.sr(provider)?;
            let small = ImageTensor::from_clamped(resize_bicubic(x.tensor(), h.div_ceil(2), w.div_ceil(2)));
            let up = sr.upscale(&small, 2)?;
            if up.shape() == x.shape() {
                Ok(up)
            } else {
                Ok(ImageTensor::from_clamped(resize_bicubic(up.tensor(), h, w)))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VictimPipeline {
    /// Personalize on the purified images, then score sampling on held-out images.
    FinetuneSample,
    /// SDEdit each purified image with the backbone.
    Sdedit,
}

/// Metric name to value.
pub type Scores = BTreeMap<String, f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub label: String,
    pub spec: DefenseSpec,
    pub scores: std::result::Result<Scores, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub pipeline: VictimPipeline,
    /// Pipeline run on the clean images.
    pub clean: Scores,
    /// Pipeline run on the unpurified adversarial images.
    pub no_defense: Scores,
    pub rows: Vec<DefenseRow>,
}

impl RobustnessReport {
    /// One column per configuration, one row per metric.
    pub fn table(&self) -> String {
        let mut cols: Vec<(String, Option<&Scores>)> = vec![
            ("clean".into(), Some(&self.clean)),
            ("no-defense".into(), Some(&self.no_defense)),
        ];
        cols.extend(self.rows.iter().map(|r| (r.label.clone(), r.scores.as_ref().ok())));
        let mut out = format!("{:<16}", "metric");
        for (label, _) in &cols {
            let _ = write!(out, " {label:>12}");
        }
        out.push('\n');
        for metric in self.clean.keys() {
            let _ = write!(out, "{metric:<16}");
            for (_, s) in &cols {
                match s.and_then(|s| s.get(metric)) {
                    Some(v) => {
                        let _ = write!(out, " {v:>12.4}");
                    }
                    None => {
                        let _ = write!(out, " {:>12}", "n/a");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

fn run_pipeline(
    images: &[ImageTensor],
    reference: &[ImageTensor],
    holdout: &[ImageTensor],
    pipeline: VictimPipeline,
    cfg: &StudyConfig,
    world: &ToyWorld,
) -> Result<Scores> {
    let mut scores = Scores::new();
    match pipeline {
        VictimPipeline::FinetuneSample => {
            let (_, _, v) = score_victim(&world.theta, images, holdout, cfg, world)?;
            scores.insert("eta_norm".into(), v.eta_norm);
            scores.insert("sdedit_ms_ssim".into(), v.sdedit_ms_ssim);
        }
        VictimPipeline::Sdedit => {
            let (h, w, _) = images[0].shape();
            let ms = MsSsimConfig::for_size(h.min(w));
            let (mut to_input, mut to_clean) = (0.0, 0.0);
            for (j, (x, r)) in images.iter().zip(reference).enumerate() {
                let seed = derive_indexed(cfg.seed, "defense-sdedit", j as u64);
                let out = sdedit(
                    &world.theta,
                    &world.backend,
                    &world.sched,
                    x,
                    cfg.sdedit_strength,
                    Some(cfg.sdedit_steps),
                    IDENTITY_COND,
                    seed,
                )?;
                to_input += ms_ssim(&out, x, &ms)?;
                to_clean += ms_ssim(&out, r, &ms)?;
            }
            let n = images.len() as f64;
            scores.insert("ms_ssim_input".into(), to_input / n);
            scores.insert("ms_ssim_clean".into(), to_clean / n);
        }
    }
    Ok(scores)
}

/// Purify `adversarial` with every spec and re-run the victim pipeline.
///
/// A failing spec is recorded in its row and the remaining specs still run.
#[allow(clippy::too_many_arguments)]
pub fn robustness_run(
    clean: &[ImageTensor],
    adversarial: &[ImageTensor],
    holdout: &[ImageTensor],
    specs: &[DefenseSpec],
    pipeline: VictimPipeline,
    registry: &DefenseRegistry,
    cfg: &StudyConfig,
    world: &ToyWorld,
) -> Result<RobustnessReport> {
    if adversarial.is_empty() || adversarial.len() != clean.len() {
        return Err(Error::invalid("adversarial and clean sets must be non-empty and the same length"));
    }
    let clean_scores = run_pipeline(clean, clean, holdout, pipeline, cfg, world)?;
    let no_defense = run_pipeline(adversarial, clean, holdout, pipeline, cfg, world)?;
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let purified: Result<Vec<ImageTensor>> = adversarial
            .iter()
            .enumerate()
            .map(|(i, x)| purify_with(x, spec, derive_indexed(cfg.seed, "purify", i as u64), registry))
            .collect();
        let scores = purified.and_then(|p| run_pipeline(&p, clean, holdout, pipeline, cfg, world));
        if let Err(e) = &scores {
            warn!("defense {} failed: {e}", spec.label());
        }
        rows.push(DefenseRow {
            label: spec.label(),
            spec: spec.clone(),
            scores: scores.map_err(|e| e.to_string()),
        });
    }
    Ok(RobustnessReport {
        pipeline,
        clean: clean_scores,
        no_defense,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = rng_from(seed);
        ImageTensor::from_clamped(Tensor3::from_fn(h, w, 3, |_, _, _| rng.random::<f64>())).quantize_8bit()
    }

    /// Sample std of the purification noise on a mid-gray image, where
    /// clamping never triggers at these sigmas.
    fn noise_std(sigma: f64) -> f64 {
        let x = ImageTensor::filled(64, 64, 3, 0.5);
        let y = purify(&x, &DefenseSpec::Gaussian { sigma }, 3).unwrap();
        let d: Vec<f64> = y.sub(&x).as_slice().to_vec();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt()
    }

    #[test]
    fn gaussian_std_in_eight_bit_units() {
        for sigma in [4.0, 8.0] {
            let target = sigma / 255.0;
            // std of the sample std is about sigma / sqrt(2n); allow 4 of those
            let tol = 4.0 * target / (2.0 * 64.0 * 64.0 * 3.0f64).sqrt();
            assert!((noise_std(sigma) - target).abs() < tol, "sigma {sigma}");
        }
    }

    #[test]
    fn zero_sigma_is_identity() {
        let x = random_image(1, 16, 16);
        assert_eq!(purify(&x, &DefenseSpec::Gaussian { sigma: 0.0 }, 9).unwrap(), x);
    }

    #[test]
    fn resize_restores_shape() {
        let x = random_image(2, 20, 12);
        for factor in [2.0, 0.5, 0.3] {
            assert_eq!(purify(&x, &DefenseSpec::Resize { factor }, 0).unwrap().shape(), x.shape());
        }
    }

    #[test]
    fn resize_keeps_constant_images() {
        let x = ImageTensor::filled(16, 16, 3, 0.25);
        let y = purify(&x, &DefenseSpec::Resize { factor: 0.5 }, 0).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn jpeg_is_nearly_idempotent() {
        let x = random_image(3, 32, 32);
        for quality in [20, 70] {
            let spec = DefenseSpec::Jpeg { quality };
            let once = purify(&x, &spec, 0).unwrap();
            let twice = purify(&once, &spec, 0).unwrap();
            assert_eq!(once.shape(), x.shape());
            assert!(twice.max_abs_diff(&once) <= 0.25, "quality {quality}: {}", twice.max_abs_diff(&once));
            assert!(twice.sub(&once).norm() < once.sub(&x).norm());
        }
    }

    #[test]
    fn sr_requires_a_provider() {
        let x = random_image(4, 16, 16);
        let spec = DefenseSpec::Sr { provider: TOY_SR.into() };
        assert!(matches!(purify(&x, &spec, 0), Err(Error::DefenseUnavailable(_))));
        let y = purify_with(&x, &spec, 0, &DefenseRegistry::with_toy_sr()).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let x = random_image(5, 8, 8);
        for spec in [
            DefenseSpec::Gaussian { sigma: -1.0 },
            DefenseSpec::Jpeg { quality: 0 },
            DefenseSpec::Jpeg { quality: 101 },
            DefenseSpec::Resize { factor: 0.0 },
        ] {
            assert!(matches!(purify(&x, &spec, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn grid_has_seven_distinct_columns() {
        let grid = default_grid();
        let labels: std::collections::BTreeSet<_> = grid.iter().map(|s| s.label()).collect();
        assert_eq!((grid.len(), labels.len()), (7, 7));
        let json = serde_json::to_string(&grid).unwrap();
        assert_eq!(serde_json::from_str::<Vec<DefenseSpec>>(&json).unwrap(), grid);
    }

    #[test]
    fn table_marks_failed_rows() {
        let scores: Scores = [("m".to_string(), 1.0)].into();
        let report = RobustnessReport {
            pipeline: VictimPipeline::Sdedit,
            clean: scores.clone(),
            no_defense: scores.clone(),
            rows: vec![DefenseRow {
                label: "sr-x".into(),
                spec: DefenseSpec::Sr { provider: "x".into() },
                scores: Err("missing".into()),
            }],
        };
        let t = report.table();
        assert!(t.contains("sr-x") && t.contains("n/a"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn purify_preserves_shape_and_range(seed in 0u64..1000, h in 4usize..20, w in 4usize..20, k in 0usize..7) {
            let x = random_image(seed, h, w);
            let spec = default_grid()[k].clone();
            let y = purify_with(&x, &spec, seed, &DefenseRegistry::with_toy_sr()).unwrap();
            prop_assert_eq!(y.shape(), x.shape());
            prop_assert!(y.min() >= 0.0 && y.max() <= 1.0);
        }
    }
}
