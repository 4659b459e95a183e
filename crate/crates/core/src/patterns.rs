//! Procedural target images and their latent targets.
//!
//! Density is the number of pattern periods per image axis; contrast is the
//! peak-to-peak amplitude around mid gray.

use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderBackend;
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternKind {
    /// Vertical bars: the value changes along x only.
    Stripes,
    Checker,
    /// A letter-like stroke glyph repeated on a grid.
    GlyphTile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternSpec {
    pub kind: PatternKind,
    pub repetition: usize,
    pub contrast: f64,
    /// Shift in units of one period.
    pub phase: f64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for PatternSpec {
    fn default() -> Self {
        Self {
            kind: PatternKind::GlyphTile,
            repetition: 8,
            contrast: 1.0,
            phase: 0.0,
            height: 32,
            width: 32,
            channels: 3,
        }
    }
}

impl PatternSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repetition == 0 {
            return Err(Error::invalid("pattern repetition must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.contrast) {
            return Err(Error::invalid(format!("contrast must lie in [0, 1], got {}", self.contrast)));
        }
        if !self.phase.is_finite() {
            return Err(Error::invalid("phase must be finite"));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::invalid("pattern size must be nonzero"));
        }
        let nyquist = self.height.min(self.width) / 2;
        if self.repetition > nyquist {
            return Err(Error::invalid(format!(
                "repetition {} exceeds the Nyquist limit {nyquist} for a {}x{} image",
                self.repetition, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Square wave: `true` on the first half of each period.
fn square(u: f64) -> bool {
    u.rem_euclid(1.0) < 0.5
}

/// Glyph strokes on the unit cell: a top bar, a stem and a foot, roughly a
/// serif "I" pushed off center so the tile is not mirror-symmetric.
fn glyph(u: f64, v: f64) -> bool {
    let (u, v) = (u.rem_euclid(1.0), v.rem_euclid(1.0));
    let top = v < 0.25 && u < 0.75;
    let stem = (0.25..0.5).contains(&u);
    let foot = v >= 0.75 && (0.25..1.0).contains(&u);
    top || stem || foot
}

pub fn generate_pattern(spec: &PatternSpec) -> Result<ImageTensor> {
    spec.validate()?;
    let hi = 0.5 + spec.contrast / 2.0;
    let lo = 0.5 - spec.contrast / 2.0;
    let r = spec.repetition as f64;
    let (h, w) = (spec.height as f64, spec.width as f64);
    let t = Tensor3::from_fn(spec.height, spec.width, spec.channels, |y, x, _| {
        let u = (x as f64 + 0.5) / w * r + spec.phase;
        let v = (y as f64 + 0.5) / h * r + spec.phase;
        let on = match spec.kind {
            PatternKind::Stripes => square(u),
            PatternKind::Checker => square(u) ^ square(v),
            PatternKind::GlyphTile => glyph(u, v),
        };
        if on {
            hi
        } else {
            lo
        }
    });
    ImageTensor::new(t)
}

/// A latent target with the content hash recorded in manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetLatent {
    pub latent: Tensor3,
    pub hash: String,
}

pub fn encode_target(x_target: &ImageTensor, backend: &AutoencoderBackend) -> Result<TargetLatent> {
    let latent = backend.encode(x_target)?;
    let hash = latent.content_hash();
    Ok(TargetLatent { latent, hash })
}

/// Per-channel count of sign changes between horizontal neighbours of
/// `t - mean(channel)`, summed over rows.
pub fn sign_alternations(t: &Tensor3) -> Vec<usize> {
    let (h, w, c) = t.shape();
    (0..c)
        .map(|ch| {
            let mean = t.channel(ch).mean();
            let mut n = 0;
            for y in 0..h {
                for x in 1..w {
                    let a = t.get(y, x - 1, ch) - mean;
                    let b = t.get(y, x, ch) - mean;
                    if (a > 0.0) != (b > 0.0) {
                        n += 1;
                    }
                }
            }
            n
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(kind: PatternKind, repetition: usize, contrast: f64) -> PatternSpec {
        PatternSpec {
            kind,
            repetition,
            contrast,
            ..Default::default()
        }
    }

    #[test]
    fn zero_contrast_is_flat_gray() {
        for kind in [PatternKind::Stripes, PatternKind::Checker, PatternKind::GlyphTile] {
            let x = generate_pattern(&spec(kind, 4, 0.0)).unwrap();
            assert!(x.as_slice().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn full_contrast_spans_unit_range() {
        let x = generate_pattern(&PatternSpec::default()).unwrap();
        assert_eq!(x.min(), 0.0);
        assert_eq!(x.max(), 1.0);
    }

    #[test]
    fn stripes_have_two_sign_changes_per_period() {
        for r in 1..=16 {
            let x = generate_pattern(&spec(PatternKind::Stripes, r, 1.0)).unwrap();
            for y in [0, 13, 31] {
                // count cyclically so a period boundary at the image edge is counted once
                let row: Vec<bool> = (0..32).map(|i| x.get(y, i, 0) > 0.5).collect();
                let changes = (0..32).filter(|&i| row[i] != row[(i + 1) % 32]).count();
                assert_eq!(changes, 2 * r, "r = {r}");
            }
        }
    }

    #[test]
    fn nyquist_and_range_rejections() {
        assert!(generate_pattern(&spec(PatternKind::Stripes, 17, 1.0)).is_err());
        assert!(generate_pattern(&spec(PatternKind::Stripes, 0, 1.0)).is_err());
        assert!(generate_pattern(&spec(PatternKind::Stripes, 2, 1.5)).is_err());
    }

    #[test]
    fn target_hash_is_stable() {
        let be = AutoencoderBackend::analytic(2, 3).unwrap();
        let x = generate_pattern(&PatternSpec::default()).unwrap();
        let a = encode_target(&x, &be).unwrap();
        let b = encode_target(&x, &be).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash.len(), 64);
    }

    #[test]
    fn constant_image_has_only_dc_energy() {
        let be = AutoencoderBackend::analytic(2, 3).unwrap();
        let x = ImageTensor::filled(8, 8, 3, 0.75);
        let z = encode_target(&x, &be).unwrap().latent;
        for y in 0..4 {
            for xx in 0..4 {
                let px = z.pixel(y, xx);
                // DC component of each color: 0.5 * 4 * (2 * 0.75 - 1) = 1
                assert_eq!(&px[..3], &[1.0, 1.0, 1.0]);
                assert!(px[3..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn contrast_raises_latent_variance() {
        let be = AutoencoderBackend::analytic(2, 3).unwrap();
        let mut last = -1.0;
        for k in 0..=10 {
            let x = generate_pattern(&spec(PatternKind::GlyphTile, 8, k as f64 / 10.0)).unwrap();
            let z = be.encode(&x).unwrap();
            let mean = z.mean();
            let var = z.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64;
            assert!(var > last);
            last = var;
        }
    }

    proptest! {
        #[test]
        fn symmetric_patterns_stay_in_range_with_mid_mean(
            r in 1usize..=16,
            contrast in 0.0f64..=1.0,
            checker in any::<bool>(),
        ) {
            let kind = if checker { PatternKind::Checker } else { PatternKind::Stripes };
            let x = generate_pattern(&spec(kind, r, contrast)).unwrap();
            prop_assert!(x.min() >= 0.0 && x.max() <= 1.0);
            if 32 % (2 * r) == 0 {
                prop_assert!((x.mean() - 0.5).abs() < 1e-6);
            }
        }
    }
}
