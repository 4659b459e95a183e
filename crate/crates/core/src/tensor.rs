//! Dense `(height, width, channels)` arrays in channel-last layout.
//!
//! [`Tensor3`] is the workhorse for images, latents, activations and bias
//! fields. [`ImageTensor`] and [`LatentTensor`] are thin newtypes that carry
//! the domain invariants (pixel range, latent role) on top of it.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![value; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::shape(format!(
                "buffer of {} values cannot hold ({h}, {w}, {c})",
                data.len()
            )));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self { h, w, c, data }
    }

    /// Standard normal draws in row-major order.
    pub fn randn<R: Rng + ?Sized>(h: usize, w: usize, c: usize, rng: &mut R) -> Self {
        let data = (0..h * w * c).map(|_| rng.sample(StandardNormal)).collect();
        Self { h, w, c, data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[self.index(y, x, ch)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        let i = self.index(y, x, ch);
        self.data[i] = v;
    }

    /// The channel vector at one spatial location.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.w + x) * self.c;
        &self.data[i..i + self.c]
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_same_shape(&self, other: &Tensor3, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor3, f: impl Fn(f64, f64) -> f64) -> Tensor3 {
        debug_assert!(self.same_shape(other));
        Tensor3 {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor3) -> Tensor3 {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor3) -> Tensor3 {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor3 {
        self.map(|v| v * s)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor3) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        self.axpy(1.0, other);
    }

    pub fn scale_assign(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn dot(&self, other: &Tensor3) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor3 {
        self.map(|v| v.clamp(lo, hi))
    }

    /// One channel as a `(h, w, 1)` tensor.
    pub fn channel(&self, ch: usize) -> Tensor3 {
        Tensor3::from_fn(self.h, self.w, 1, |y, x, _| self.get(y, x, ch))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(a: &Tensor3, b: &Tensor3) -> Tensor3 {
        debug_assert_eq!((a.h, a.w), (b.h, b.w));
        let c = a.c + b.c;
        let mut data = Vec::with_capacity(a.h * a.w * c);
        for p in 0..a.h * a.w {
            data.extend_from_slice(&a.data[p * a.c..(p + 1) * a.c]);
            data.extend_from_slice(&b.data[p * b.c..(p + 1) * b.c]);
        }
        Tensor3 { h: a.h, w: a.w, c, data }
    }

    /// Inverse of [`Tensor3::concat_channels`].
    pub fn split_channels(&self, first: usize) -> (Tensor3, Tensor3) {
        let second = self.c - first;
        let mut a = Vec::with_capacity(self.h * self.w * first);
        let mut b = Vec::with_capacity(self.h * self.w * second);
        for p in 0..self.h * self.w {
            let px = &self.data[p * self.c..(p + 1) * self.c];
            a.extend_from_slice(&px[..first]);
            b.extend_from_slice(&px[first..]);
        }
        (
            Tensor3 { h: self.h, w: self.w, c: first, data: a },
            Tensor3 { h: self.h, w: self.w, c: second, data: b },
        )
    }

    /// Little-endian f64 bytes in row-major order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// SHA-256 over the shape and the little-endian payload.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for d in [self.h, self.w, self.c] {
            hasher.update((d as u64).to_le_bytes());
        }
        hasher.update(self.to_le_bytes());
        hex::encode(hasher.finalize())
    }
}

/// An `H x W x C` image with every value finite and inside `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor(Tensor3);

impl ImageTensor {
    pub fn new(t: Tensor3) -> Result<Self> {
        if !t.is_finite() {
            return Err(Error::NonFinite("image pixels".into()));
        }
        if t.as_slice().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("image pixels must lie in [0, 1]"));
        }
        Ok(Self(t))
    }

    /// Clamp into `[0, 1]`; non-finite values become 0.
    pub fn from_clamped(t: Tensor3) -> Self {
        Self(t.map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 }))
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Self {
        Self::from_clamped(Tensor3::filled(h, w, c, value))
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.0
    }

    /// Round every value to the nearest multiple of 1/255.
    pub fn quantize_8bit(&self) -> ImageTensor {
        Self(self.0.map(|v| (v * 255.0).round() / 255.0))
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.0
            .as_slice()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_u8(h: usize, w: usize, c: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Self(Tensor3::from_vec(h, w, c, data)?))
    }
}

impl Deref for ImageTensor {
    type Target = Tensor3;
    fn deref(&self) -> &Tensor3 {
        &self.0
    }
}

/// An `h x w x c` latent: encoder output, noised latent, target or bias field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTensor(Tensor3);

impl LatentTensor {
    pub fn new(t: Tensor3) -> Self {
        Self(t)
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self(Tensor3::zeros(h, w, c))
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.0
    }
}

impl Deref for LatentTensor {
    type Target = Tensor3;
    fn deref(&self) -> &Tensor3 {
        &self.0
    }
}

impl DerefMut for LatentTensor {
    fn deref_mut(&mut self) -> &mut Tensor3 {
        &mut self.0
    }
}

impl From<Tensor3> for LatentTensor {
    fn from(t: Tensor3) -> Self {
        Self(t)
    }
}

/// Cosine similarity of two flattened tensors; `None` when either norm is zero.
pub fn cosine(a: &Tensor3, b: &Tensor3) -> Option<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}
