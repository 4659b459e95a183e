//! Image <-> latent maps.
//!
//! Two backends share one interface. The analytic backend is an orthogonal
//! patch transform: each `f x f x C` pixel block becomes `f*f*C` latent
//! channels through a normalized Hadamard matrix, so it is exactly
//! invertible and its Jacobian is a constant. The trained backend is a tiny
//! convolutional autoencoder fitted to the toy dataset.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    depth_to_space, silu, silu_backward, space_to_depth, ConvLayer, Grads, Optimizer, OptimizerKind, ParamStore,
};
use crate::rng::rng_from;
use crate::tensor::{ImageTensor, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AutoencoderKind {
    AnalyticOrthogonal,
    TrainedConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AutoencoderBackend {
    Analytic(AnalyticAutoencoder),
    Trained(ConvAutoencoder),
}

impl AutoencoderBackend {
    pub fn analytic(factor: usize, image_channels: usize) -> Result<Self> {
        Ok(Self::Analytic(AnalyticAutoencoder::new(factor, image_channels)?))
    }

    pub fn kind(&self) -> AutoencoderKind {
        match self {
            Self::Analytic(_) => AutoencoderKind::AnalyticOrthogonal,
            Self::Trained(_) => AutoencoderKind::TrainedConv,
        }
    }

    pub fn factor(&self) -> usize {
        match self {
            Self::Analytic(a) => a.factor,
            Self::Trained(t) => t.factor,
        }
    }

    pub fn image_channels(&self) -> usize {
        match self {
            Self::Analytic(a) => a.image_channels,
            Self::Trained(t) => t.image_channels,
        }
    }

    pub fn latent_channels(&self) -> usize {
        match self {
            Self::Analytic(a) => a.latent_channels(),
            Self::Trained(t) => t.latent_channels,
        }
    }

    pub fn latent_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let f = self.factor();
        (h / f, w / f, self.latent_channels())
    }

    fn check_image(&self, x: &Tensor3) -> Result<()> {
        let (h, w, c) = x.shape();
        let f = self.factor();
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("image {h}x{w} not divisible by factor {f}")));
        }
        if c != self.image_channels() {
            return Err(Error::shape(format!(
                "image has {c} channels, backend expects {}",
                self.image_channels()
            )));
        }
        Ok(())
    }

    fn check_latent(&self, z: &Tensor3) -> Result<()> {
        if z.channels() != self.latent_channels() || z.is_empty() {
            return Err(Error::shape(format!(
                "latent has {} channels, backend expects {}",
                z.channels(),
                self.latent_channels()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &ImageTensor) -> Result<Tensor3> {
        self.encode_raw(x)
    }

    /// Encode any same-shaped array, in range or not.
    pub fn encode_raw(&self, x: &Tensor3) -> Result<Tensor3> {
        self.check_image(x)?;
        Ok(match self {
            Self::Analytic(a) => a.encode(x),
            Self::Trained(t) => t.encode(x),
        })
    }

    /// Decoder output before clamping.
    pub fn decode_raw(&self, z: &Tensor3) -> Result<Tensor3> {
        self.check_latent(z)?;
        Ok(match self {
            Self::Analytic(a) => a.decode(z),
            Self::Trained(t) => t.decode(z),
        })
    }

    pub fn decode(&self, z: &Tensor3) -> Result<ImageTensor> {
        Ok(ImageTensor::from_clamped(self.decode_raw(z)?))
    }

    /// Pull a latent-space gradient back to pixel space through the encoder.
    pub fn encode_vjp(&self, x: &Tensor3, grad_z: &Tensor3) -> Result<Tensor3> {
        self.check_image(x)?;
        Ok(match self {
            Self::Analytic(a) => a.encode_vjp(grad_z),
            Self::Trained(t) => t.encode_vjp(x, grad_z),
        })
    }
}

/// Orthogonal patch transform `z = M (2x - 1)` with `M` a normalized
/// Sylvester-Hadamard matrix over pixel positions, applied per color channel.
///
/// Latent channel `k * C + c` holds Hadamard component `k` of color `c`, so
/// the first `C` channels are the block means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticAutoencoder {
    factor: usize,
    image_channels: usize,
    /// Row-major `f^2 x f^2`, symmetric and orthogonal.
    hadamard: Vec<f64>,
}

impl AnalyticAutoencoder {
    pub fn new(factor: usize, image_channels: usize) -> Result<Self> {
        if factor == 0 || !factor.is_power_of_two() {
            return Err(Error::invalid(format!("factor must be a power of two, got {factor}")));
        }
        if image_channels == 0 {
            return Err(Error::invalid("image needs at least one channel"));
        }
        let n = factor * factor;
        let norm = 1.0 / factor as f64;
        let hadamard = (0..n * n)
            .map(|i| {
                let (r, c) = (i / n, i % n);
                if (r & c).count_ones() % 2 == 0 {
                    norm
                } else {
                    -norm
                }
            })
            .collect();
        Ok(Self {
            factor,
            image_channels,
            hadamard,
        })
    }

    pub fn latent_channels(&self) -> usize {
        self.factor * self.factor * self.image_channels
    }

    /// The stored orthogonal matrix, row-major `f^2 x f^2`.
    pub fn matrix(&self) -> &[f64] {
        &self.hadamard
    }

    fn mix(&self, src: &Tensor3) -> Tensor3 {
        let n = self.factor * self.factor;
        let c = self.image_channels;
        let (h, w, lc) = src.shape();
        let mut out = Tensor3::zeros(h, w, lc);
        for (o, s) in out
            .as_mut_slice()
            .chunks_exact_mut(lc)
            .zip(src.as_slice().chunks_exact(lc))
        {
            for k in 0..n {
                let row = &self.hadamard[k * n..(k + 1) * n];
                for ch in 0..c {
                    o[k * c + ch] = (0..n).map(|p| row[p] * s[p * c + ch]).sum();
                }
            }
        }
        out
    }

    pub fn encode(&self, x: &Tensor3) -> Tensor3 {
        let centered = x.map(|v| 2.0 * v - 1.0);
        self.mix(&space_to_depth(&centered, self.factor))
    }

    pub fn decode(&self, z: &Tensor3) -> Tensor3 {
        let folded = self.mix(z);
        depth_to_space(&folded, self.factor).map(|v| (v + 1.0) * 0.5)
    }

    pub fn encode_vjp(&self, grad_z: &Tensor3) -> Tensor3 {
        depth_to_space(&self.mix(grad_z), self.factor).scale(2.0)
    }
}

/// Training recipe for [`ConvAutoencoder`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderTraining {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: usize,
    pub latent_channels: usize,
    pub seed: u64,
}

impl Default for AutoencoderTraining {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 8,
            lr: 5e-3,
            hidden: 16,
            latent_channels: 4,
            seed: 0,
        }
    }
}

/// `conv3x3 -> silu -> space_to_depth -> conv1x1` and the mirror image.
///
/// Latents are divided by the training-set latent standard deviation so the
/// diffusion model sees roughly unit-variance inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvAutoencoder {
    factor: usize,
    image_channels: usize,
    latent_channels: usize,
    params: ParamStore,
    enc_in: ConvLayer,
    enc_out: ConvLayer,
    dec_in: ConvLayer,
    dec_out: ConvLayer,
    latent_scale: f64,
}

struct AeCache {
    x: Tensor3,
    h1: Tensor3,
    folded: Tensor3,
    z: Tensor3,
    unfolded: Tensor3,
    a2: Tensor3,
}

impl ConvAutoencoder {
    pub fn init(image_channels: usize, hidden: usize, latent_channels: usize, seed: u64) -> Self {
        let factor = 2;
        let mut rng = rng_from(seed);
        let mut params = ParamStore::new();
        let f2 = factor * factor;
        let enc_in = ConvLayer::init(&mut params, "enc.in", 3, image_channels, hidden, 1.0, &mut rng);
        let enc_out = ConvLayer::init(&mut params, "enc.out", 1, hidden * f2, latent_channels, 1.0, &mut rng);
        let dec_in = ConvLayer::init(&mut params, "dec.in", 1, latent_channels, hidden * f2, 1.0, &mut rng);
        let dec_out = ConvLayer::init(&mut params, "dec.out", 3, hidden, image_channels, 1.0, &mut rng);
        Self {
            factor,
            image_channels,
            latent_channels,
            params,
            enc_in,
            enc_out,
            dec_in,
            dec_out,
            latent_scale: 1.0,
        }
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn forward_cached(&self, x: &Tensor3) -> (Tensor3, AeCache) {
        let ps = &self.params;
        let h1 = self.enc_in.forward(ps, x);
        let a1 = silu(&h1);
        let folded = space_to_depth(&a1, self.factor);
        let z = self.enc_out.forward(ps, &folded);
        let unfolded = depth_to_space(&self.dec_in.forward(ps, &z), self.factor);
        let a2 = silu(&unfolded);
        let y = self.dec_out.forward(ps, &a2);
        (
            y,
            AeCache {
                x: x.clone(),
                h1,
                folded,
                z,
                unfolded,
                a2,
            },
        )
    }

    fn backward_recon(&self, c: &AeCache, g_y: &Tensor3, grads: &mut Grads) {
        let ps = &self.params;
        let g_a2 = self.dec_out.backward(ps, &c.a2, g_y, Some(grads));
        let g_un = silu_backward(&c.unfolded, &g_a2);
        let g_z = self
            .dec_in
            .backward(ps, &c.z, &space_to_depth(&g_un, self.factor), Some(grads));
        self.encoder_backward(c, &g_z, Some(grads));
    }

    fn encoder_backward(&self, c: &AeCache, g_z: &Tensor3, mut grads: Option<&mut Grads>) -> Tensor3 {
        let ps = &self.params;
        let g_f = self.enc_out.backward(ps, &c.folded, g_z, grads.as_deref_mut());
        let g_a1 = depth_to_space(&g_f, self.factor);
        let g_h1 = silu_backward(&c.h1, &g_a1);
        self.enc_in.backward(ps, &c.x, &g_h1, grads)
    }

    pub fn encode(&self, x: &Tensor3) -> Tensor3 {
        let ps = &self.params;
        let a1 = silu(&self.enc_in.forward(ps, x));
        self.enc_out
            .forward(ps, &space_to_depth(&a1, self.factor))
            .scale(self.latent_scale)
    }

    pub fn decode(&self, z: &Tensor3) -> Tensor3 {
        let ps = &self.params;
        let unfolded = depth_to_space(&self.dec_in.forward(ps, &z.scale(1.0 / self.latent_scale)), self.factor);
        self.dec_out.forward(ps, &silu(&unfolded))
    }

    pub fn encode_vjp(&self, x: &Tensor3, grad_z: &Tensor3) -> Tensor3 {
        let (_, cache) = self.forward_cached(x);
        self.encoder_backward(&cache, &grad_z.scale(self.latent_scale), None)
    }

    /// Fit by Adam on pixel MSE, then set the latent scale.
    pub fn train(images: &[ImageTensor], cfg: &AutoencoderTraining) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Empty("autoencoder training set"));
        }
        let channels = images[0].channels();
        let mut ae = Self::init(channels, cfg.hidden, cfg.latent_channels, cfg.seed);
        let mut rng: ChaCha8Rng = rng_from(cfg.seed ^ 0x5eed);
        let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.lr, &ae.params);
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut cursor = order.len();
        for step in 0..cfg.steps {
            let mut grads = Grads::zeros_like(&ae.params);
            let mut loss = 0.0;
            for _ in 0..cfg.batch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let x = images[order[cursor]].tensor();
                cursor += 1;
                let (y, cache) = ae.forward_cached(x);
                let n = (x.len() * cfg.batch) as f64;
                let diff = y.sub(x);
                loss += diff.sum_sq() / n;
                ae.backward_recon(&cache, &diff.scale(2.0 / n), &mut grads);
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("autoencoder loss at step {step}")));
            }
            opt.step(&mut ae.params, &grads, |_| true);
        }
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for x in images {
            let z = ae.encode(x.tensor());
            sum_sq += z.sum_sq();
            count += z.len();
        }
        let std = (sum_sq / count as f64).sqrt();
        if std > 0.0 {
            ae.latent_scale = 1.0 / std;
        }
        Ok(ae)
    }
}

/// Mean squared reconstruction error of `decode(encode(x))` over a set.
pub fn reconstruction_mse(backend: &AutoencoderBackend, images: &[ImageTensor]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("reconstruction set"));
    }
    let mut total = 0.0;
    for x in images {
        let y = backend.decode(&backend.encode(x)?)?;
        total += y.sub(x).sum_sq() / x.len() as f64;
    }
    Ok(total / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn dyadic_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = rng_from(seed);
        ImageTensor::new(Tensor3::from_fn(h, w, 3, |_, _, _| rng.random_range(0..=256) as f64 / 256.0)).unwrap()
    }

    #[test]
    fn hadamard_is_orthogonal() {
        let ae = AnalyticAutoencoder::new(2, 3).unwrap();
        let m = ae.matrix();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..4).map(|k| m[i * 4 + k] * m[j * 4 + k]).sum();
                assert_eq!(dot, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn analytic_roundtrip_is_exact_on_dyadic_grid() {
        let be = AutoencoderBackend::analytic(2, 3).unwrap();
        for seed in 0..5 {
            let x = dyadic_image(seed, 8, 12);
            let z = be.encode(&x).unwrap();
            assert_eq!(z.shape(), (4, 6, 12));
            let y = be.decode(&z).unwrap();
            assert_eq!(y.max_abs_diff(&x), 0.0);
        }
    }

    #[test]
    fn analytic_roundtrip_is_tight_on_arbitrary_values() {
        let be = AutoencoderBackend::analytic(4, 3).unwrap();
        let mut rng = rng_from(3);
        let x = ImageTensor::new(Tensor3::from_fn(8, 8, 3, |_, _, _| rng.random::<f64>())).unwrap();
        let y = be.decode(&be.encode(&x).unwrap()).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn zero_latent_decodes_to_mid_gray() {
        let be = AutoencoderBackend::analytic(2, 3).unwrap();
        let y = be.decode(&Tensor3::zeros(4, 4, 12)).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn analytic_vjp_matches_linear_map() {
        let be = AutoencoderBackend::analytic(2, 3).unwrap();
        let mut rng = rng_from(4);
        let x = Tensor3::from_fn(4, 4, 3, |_, _, _| rng.random::<f64>());
        let dx = Tensor3::randn(4, 4, 3, &mut rng);
        let g = Tensor3::randn(2, 2, 12, &mut rng);
        // <g, E(x + dx) - E(x)> = <E^T g, dx> for an affine encoder
        let lhs = be
            .encode_raw(&x.add(&dx))
            .unwrap()
            .sub(&be.encode_raw(&x).unwrap())
            .dot(&g);
        let rhs = be.encode_vjp(&x, &g).unwrap().dot(&dx);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_shapes() {
        let be = AutoencoderBackend::analytic(2, 3).unwrap();
        assert!(be.encode(&ImageTensor::filled(5, 4, 3, 0.1)).is_err());
        assert!(be.encode(&ImageTensor::filled(4, 4, 1, 0.1)).is_err());
        assert!(be.decode(&Tensor3::zeros(2, 2, 4)).is_err());
        assert!(AnalyticAutoencoder::new(3, 3).is_err());
    }

    #[test]
    fn conv_encoder_vjp_matches_finite_differences() {
        let ae = ConvAutoencoder::init(3, 4, 2, 5);
        let be = AutoencoderBackend::Trained(ae);
        let mut rng = rng_from(6);
        let x = Tensor3::from_fn(4, 4, 3, |_, _, _| rng.random::<f64>());
        let g = Tensor3::randn(2, 2, 2, &mut rng);
        let gx = be.encode_vjp(&x, &g).unwrap();
        let h = 1e-6;
        for i in [0, 13, 47] {
            let mut p = x.clone();
            p.as_mut_slice()[i] += h;
            let mut m = x.clone();
            m.as_mut_slice()[i] -= h;
            let fd = (be.encode_raw(&p).unwrap().dot(&g) - be.encode_raw(&m).unwrap().dot(&g)) / (2.0 * h);
            assert!((fd - gx.as_slice()[i]).abs() < 1e-7 * (1.0 + fd.abs()));
        }
    }
}
