//! Image-quality metrics: MS-SSIM, and CLIP-style similarity scores behind an
//! embedding-provider interface.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{ImageTensor, Tensor3};

/// Published MS-SSIM scale weights. They sum to 1.0001, so they are
/// renormalized before use.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsSsimConfig {
    pub scales: usize,
    pub weights: Vec<f64>,
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        Self::truncated(5, 11)
    }
}

impl MsSsimConfig {
    /// The first `scales` published weights, renormalized, with a Gaussian
    /// window of `window` taps and sigma 1.5.
    pub fn truncated(scales: usize, window: usize) -> Self {
        let n = scales.clamp(1, MS_SSIM_WEIGHTS.len());
        let w = &MS_SSIM_WEIGHTS[..n];
        let sum: f64 = w.iter().sum();
        Self {
            scales: n,
            weights: w.iter().map(|v| v / sum).collect(),
            window,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }

    /// Plain SSIM.
    pub fn single_scale() -> Self {
        Self::truncated(1, 11)
    }

    /// The deepest standard-window config a `side x side` image supports,
    /// falling back to a 7-tap window below 11 pixels per coarsest scale.
    pub fn for_size(side: usize) -> Self {
        for window in [11, 7] {
            for scales in (1..=5).rev() {
                let cfg = Self::truncated(scales, window);
                if side >> (scales - 1) >= window {
                    return cfg;
                }
            }
        }
        Self::truncated(1, 7)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.weights.len() != self.scales {
            return Err(Error::Config("ms-ssim needs one weight per scale and at least one scale".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Config(format!("ms-ssim weights must be nonnegative and sum to 1, got {sum}")));
        }
        if self.window == 0 || self.window.is_multiple_of(2) || !(self.sigma > 0.0) {
            return Err(Error::Config("ms-ssim window must be odd with sigma > 0".into()));
        }
        Ok(())
    }
}

fn gaussian_taps(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n / 2) as f64;
    let g: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filter of one channel plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = taps.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term of one channel.
fn ssim_cs(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64], c1: f64, c2: f64) -> (f64, f64) {
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect::<Vec<_>>();
    let (mu_a, oh, ow) = filter_valid(a, h, w, taps);
    let (mu_b, ..) = filter_valid(b, h, w, taps);
    let (aa, ..) = filter_valid(&prod(&|x, _| x * x), h, w, taps);
    let (bb, ..) = filter_valid(&prod(&|_, y| y * y), h, w, taps);
    let (ab, ..) = filter_valid(&prod(&|x, y| x * y), h, w, taps);
    let n = (oh * ow) as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let cs_i = (2.0 * cov + c2) / (va + vb + c2);
        let l_i = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        ssim += l_i * cs_i;
        cs += cs_i;
    }
    (ssim / n, cs / n)
}

/// 2x2 average pooling; an odd trailing row or column is dropped.
fn downsample(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * w + 2 * x;
            out[y * ow + x] = 0.25 * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]);
        }
    }
    (out, oh, ow)
}

/// Multi-scale SSIM on the [0, 1] range, averaged over channels.
pub fn ms_ssim(x: &ImageTensor, y: &ImageTensor, cfg: &MsSsimConfig) -> Result<f64> {
    cfg.validate()?;
    x.check_same_shape(y, "ms-ssim input")?;
    let (h, w, c) = x.shape();
    let min_side = h.min(w) >> (cfg.scales - 1);
    if min_side < cfg.window {
        return Err(Error::shape(format!(
            "{h}x{w} image is too small for {} scales with a {}-tap window",
            cfg.scales, cfg.window
        )));
    }
    let taps = gaussian_taps(cfg.window, cfg.sigma);
    let (c1, c2) = (cfg.k1 * cfg.k1, cfg.k2 * cfg.k2);
    let mut total = 0.0;
    for ch in 0..c {
        let (mut a, mut b) = (x.channel(ch).into_vec(), y.channel(ch).into_vec());
        let (mut hh, mut ww) = (h, w);
        let mut value = 1.0;
        for s in 0..cfg.scales {
            let (ssim, cs) = ssim_cs(&a, &b, hh, ww, &taps, c1, c2);
            let term = if s + 1 == cfg.scales { ssim } else { cs };
            value *= term.max(0.0).powf(cfg.weights[s]);
            if s + 1 < cfg.scales {
                let (da, nh, nw) = downsample(&a, hh, ww);
                let (db, ..) = downsample(&b, hh, ww);
                (a, b, hh, ww) = (da, db, nh, nw);
            }
        }
        total += value;
    }
    Ok(total / c as f64)
}

/// Image and text encoder producing unit-norm vectors in a shared space.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_image(&self, x: &ImageTensor) -> Result<Vec<f64>>;
    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>>;
}

pub const POSITIVE_PROMPT: &str = "A good photo of a person";
pub const NEGATIVE_PROMPT: &str = "A bad photo of a person";

fn unit(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::MetricUnavailable("embedding has zero or non-finite norm".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Deterministic stand-in for a CLIP model: an 8x8 area downsample of the
/// gray image, centered and sent through a fixed Gaussian projection. Text
/// embeddings are Gaussian vectors seeded by the prompt.
#[derive(Clone, Debug)]
pub struct ProjectionProvider {
    dim: usize,
    projection: Vec<f64>,
    seed: u64,
}

const GRID: usize = 8;

impl ProjectionProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = rng_from(derive_seed(seed, "projection"));
        let projection = (0..dim * GRID * GRID).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { dim, projection, seed }
    }

    /// Gray 8x8 area average, centered on mid gray.
    pub fn features(x: &ImageTensor) -> Vec<f64> {
        let (h, w, c) = x.shape();
        let mut f = vec![0.0; GRID * GRID];
        for (gy, row) in f.chunks_mut(GRID).enumerate() {
            let (y0, y1) = (gy * h / GRID, ((gy + 1) * h / GRID).max(gy * h / GRID + 1));
            for (gx, v) in row.iter_mut().enumerate() {
                let (x0, x1) = (gx * w / GRID, ((gx + 1) * w / GRID).max(gx * w / GRID + 1));
                let mut s = 0.0;
                for yy in y0..y1.min(h) {
                    for xx in x0..x1.min(w) {
                        s += x.pixel(yy, xx).iter().sum::<f64>() / c as f64;
                    }
                }
                *v = s / ((y1.min(h) - y0) * (x1.min(w) - x0)) as f64 - 0.5;
            }
        }
        f
    }

    pub fn projection_row(&self, k: usize) -> &[f64] {
        &self.projection[k * GRID * GRID..(k + 1) * GRID * GRID]
    }
}

impl Default for ProjectionProvider {
    fn default() -> Self {
        Self::new(32, 0)
    }
}

impl EmbeddingProvider for ProjectionProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, x: &ImageTensor) -> Result<Vec<f64>> {
        let f = Self::features(x);
        // a tiny constant keeps flat gray images embeddable
        let v = (0..self.dim).map(|k| dot(self.projection_row(k), &f) + 1e-9).collect();
        unit(v)
    }

    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>> {
        let normalized = prompt.trim().to_lowercase();
        let mut rng = rng_from(derive_seed(self.seed, &format!("text:{normalized}")));
        unit((0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
    }
}

/// Cosine of the two image embeddings.
pub fn clip_sim(x: &ImageTensor, y: &ImageTensor, provider: &dyn EmbeddingProvider) -> Result<f64> {
    let (a, b) = (provider.embed_image(x)?, provider.embed_image(y)?);
    if a.len() != b.len() {
        return Err(Error::MetricUnavailable("provider returned embeddings of different sizes".into()));
    }
    Ok(dot(&a, &b))
}

/// Mean similarity to the negative prompt, times 100. Higher means the
/// images read as worse photos.
pub fn clip_iqa(images: &[ImageTensor], negative: &str, provider: &dyn EmbeddingProvider) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("clip-iqa image list"));
    }
    let t = provider.embed_text(negative)?;
    let mut s = 0.0;
    for x in images {
        s += dot(&provider.embed_image(x)?, &t);
    }
    Ok(100.0 * s / images.len() as f64)
}

/// Renders `f` (an 8x8 feature grid) back to an image by block replication.
pub fn features_to_image(f: &[f64], side: usize, channels: usize) -> Result<ImageTensor> {
    if f.len() != GRID * GRID || !side.is_multiple_of(GRID) {
        return Err(Error::invalid("feature grid must be 8x8 and side a multiple of 8"));
    }
    let b = side / GRID;
    ImageTensor::new(Tensor3::from_fn(side, side, channels, |y, x, _| 0.5 + f[(y / b) * GRID + x / b]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_img(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut r = rng_from(seed);
        ImageTensor::new(Tensor3::from_fn(h, w, 3, |_, _, _| r.random_range(0.0..1.0))).unwrap()
    }

    /// Direct windowed SSIM with a 2-D kernel, written independently of the
    /// separable implementation above.
    fn ssim_oracle(x: &ImageTensor, y: &ImageTensor) -> f64 {
        let (h, w, c) = x.shape();
        let n = 11;
        let mut k2 = vec![vec![0.0; n]; n];
        let mut total = 0.0;
        for (i, row) in k2.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                total += *v;
            }
        }
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut acc = 0.0;
        for ch in 0..c {
            let mut s = 0.0;
            let mut cnt = 0.0;
            for y0 in 0..=h - n {
                for x0 in 0..=w - n {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..n {
                        for j in 0..n {
                            let k = k2[i][j] / total;
                            let a = x.get(y0 + i, x0 + j, ch);
                            let b = y.get(y0 + i, x0 + j, ch);
                            mx += k * a;
                            my += k * b;
                            sxx += k * a * a;
                            syy += k * b * b;
                            sxy += k * a * b;
                        }
                    }
                    let vx = sxx - mx * mx;
                    let vy = syy - my * my;
                    let cov = sxy - mx * my;
                    s += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    cnt += 1.0;
                }
            }
            acc += s / cnt;
        }
        acc / c as f64
    }

    #[test]
    fn default_weights_are_normalized() {
        let cfg = MsSsimConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.scales, 5);
        assert!((cfg.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_scale_matches_oracle() {
        for s in 0..5 {
            let x = rand_img(s, 20, 24);
            let y = ImageTensor::from_clamped(x.zip_map(&rand_img(s + 100, 20, 24), |a, b| 0.7 * a + 0.3 * b));
            let got = ms_ssim(&x, &y, &MsSsimConfig::single_scale()).unwrap();
            assert!((got - ssim_oracle(&x, &y)).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_and_inversion() {
        let x = rand_img(1, 176, 176);
        assert!((ms_ssim(&x, &x, &MsSsimConfig::default()).unwrap() - 1.0).abs() < 1e-12);
        let checker = ImageTensor::new(Tensor3::from_fn(32, 32, 3, |y, x, _| ((y / 2 + x / 2) % 2) as f64)).unwrap();
        let inv = ImageTensor::new(checker.map(|v| 1.0 - v)).unwrap();
        let v = ms_ssim(&checker, &inv, &MsSsimConfig::for_size(32)).unwrap();
        assert!(v < 0.2, "{v}");
    }

    #[test]
    fn size_checks() {
        let x = rand_img(2, 32, 32);
        assert!(ms_ssim(&x, &x, &MsSsimConfig::default()).is_err());
        let cfg = MsSsimConfig::for_size(32);
        assert_eq!((cfg.scales, cfg.window), (2, 11));
        assert!((ms_ssim(&x, &x, &cfg).unwrap() - 1.0).abs() < 1e-12);
        assert!(ms_ssim(&x, &rand_img(2, 32, 36), &cfg).is_err());
        let bad = MsSsimConfig {
            weights: vec![0.5, 0.4],
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn provider_basics() {
        let p = ProjectionProvider::default();
        let x = rand_img(3, 32, 32);
        let e = p.embed_image(&x).unwrap();
        assert!((dot(&e, &e) - 1.0).abs() < 1e-12);
        assert_eq!(e, p.embed_image(&x).unwrap());
        assert!((clip_sim(&x, &x, &p).unwrap() - 1.0).abs() < 1e-12);
        let t = p.embed_text(NEGATIVE_PROMPT).unwrap();
        assert_eq!(t, p.embed_text(" a bad photo of a person").unwrap());
        assert_ne!(t, p.embed_text(POSITIVE_PROMPT).unwrap());
        assert!(clip_iqa(&[], NEGATIVE_PROMPT, &p).is_err());
    }

    struct Fixed(Vec<f64>, Vec<f64>);

    impl EmbeddingProvider for Fixed {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn embed_image(&self, _: &ImageTensor) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
        fn embed_text(&self, _: &str) -> Result<Vec<f64>> {
            Ok(self.1.clone())
        }
    }

    struct Broken;

    impl EmbeddingProvider for Broken {
        fn dim(&self) -> usize {
            0
        }
        fn embed_image(&self, _: &ImageTensor) -> Result<Vec<f64>> {
            Err(Error::MetricUnavailable("no weights".into()))
        }
        fn embed_text(&self, _: &str) -> Result<Vec<f64>> {
            Err(Error::MetricUnavailable("no weights".into()))
        }
    }

    #[test]
    fn stub_providers() {
        let x = rand_img(4, 8, 8);
        let same = Fixed(vec![0.6, 0.8], vec![0.6, 0.8]);
        assert!((clip_iqa(std::slice::from_ref(&x), NEGATIVE_PROMPT, &same).unwrap() - 100.0).abs() < 1e-9);
        let ortho = Fixed(vec![1.0, 0.0], vec![0.0, 1.0]);
        assert_eq!(clip_iqa(std::slice::from_ref(&x), NEGATIVE_PROMPT, &ortho).unwrap(), 0.0);
        assert!(matches!(clip_sim(&x, &x, &Broken), Err(Error::MetricUnavailable(_))));
    }

    #[test]
    fn images_built_toward_negative_prompt_score_higher() {
        let p = ProjectionProvider::default();
        let t = p.embed_text(NEGATIVE_PROMPT).unwrap();
        // back-project the text embedding onto the feature grid
        let mut toward = vec![0.0; 64];
        for (k, tk) in t.iter().enumerate() {
            for (f, r) in toward.iter_mut().zip(p.projection_row(k)) {
                *f += tk * r;
            }
        }
        let mut r = rng_from(77);
        let other: Vec<f64> = (0..64).map(|_| r.random_range(-1.0..1.0)).collect();
        let scale = |v: &[f64]| v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let (mt, mo) = (scale(&toward), scale(&other));
        let mut last = f64::NEG_INFINITY;
        for mix in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let f: Vec<f64> = toward.iter().zip(&other).map(|(a, b)| 0.45 * (mix * a / mt + (1.0 - mix) * b / mo)).collect();
            let img = features_to_image(&f, 32, 3).unwrap();
            let score = clip_iqa(&[img], NEGATIVE_PROMPT, &p).unwrap();
            assert!(score > last, "{score} after {last}");
            last = score;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn symmetric_and_channel_permutation_invariant(seed in any::<u64>()) {
            let x = rand_img(seed, 32, 32);
            let y = rand_img(seed ^ 1, 32, 32);
            let cfg = MsSsimConfig::for_size(32);
            let a = ms_ssim(&x, &y, &cfg).unwrap();
            prop_assert!((a - ms_ssim(&y, &x, &cfg).unwrap()).abs() < 1e-9);
            let perm = |t: &ImageTensor| ImageTensor::new(Tensor3::from_fn(32, 32, 3, |i, j, c| t.get(i, j, (c + 1) % 3))).unwrap();
            prop_assert!((a - ms_ssim(&perm(&x), &perm(&y), &cfg).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
