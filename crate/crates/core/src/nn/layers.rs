use std::borrow::Cow;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamId, ParamRole, ParamStore};
use crate::tensor::Tensor3;

/// Same-padded stride-1 convolution. `weight` is laid out `[k][k][cin][cout]`.
pub fn conv2d_forward(input: &Tensor3, weight: &[f64], bias: &[f64], k: usize, cout: usize) -> Tensor3 {
    let (h, w, cin) = input.shape();
    debug_assert_eq!(weight.len(), k * k * cin * cout);
    let pad = k / 2;
    let src = input.as_slice();
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for x in 0..w {
            let o = &mut out[(y * w + x) * cout..(y * w + x + 1) * cout];
            o.copy_from_slice(bias);
            for ky in 0..k {
                let iy = y + ky;
                if iy < pad || iy - pad >= h {
                    continue;
                }
                let iy = iy - pad;
                for kx in 0..k {
                    let ix = x + kx;
                    if ix < pad || ix - pad >= w {
                        continue;
                    }
                    let ix = ix - pad;
                    let px = &src[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    let tap = &weight[(ky * k + kx) * cin * cout..(ky * k + kx + 1) * cin * cout];
                    for (ci, &v) in px.iter().enumerate() {
                        let row = &tap[ci * cout..(ci + 1) * cout];
                        for (oo, &wv) in o.iter_mut().zip(row) {
                            *oo += v * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor3::from_vec(h, w, cout, out).expect("conv output shape")
}

/// Gradient of a same-padded convolution with respect to its input.
pub fn conv2d_backward_input(grad_out: &Tensor3, weight: &[f64], k: usize, cin: usize) -> Tensor3 {
    let (h, w, cout) = grad_out.shape();
    let pad = k / 2;
    let go = grad_out.as_slice();
    let mut gin = vec![0.0; h * w * cin];
    for y in 0..h {
        for x in 0..w {
            let g = &go[(y * w + x) * cout..(y * w + x + 1) * cout];
            for ky in 0..k {
                let iy = y + ky;
                if iy < pad || iy - pad >= h {
                    continue;
                }
                let iy = iy - pad;
                for kx in 0..k {
                    let ix = x + kx;
                    if ix < pad || ix - pad >= w {
                        continue;
                    }
                    let ix = ix - pad;
                    let gi = &mut gin[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    let tap = &weight[(ky * k + kx) * cin * cout..(ky * k + kx + 1) * cin * cout];
                    for (ci, gv) in gi.iter_mut().enumerate() {
                        let row = &tap[ci * cout..(ci + 1) * cout];
                        let mut acc = 0.0;
                        for (&a, &b) in row.iter().zip(g) {
                            acc += a * b;
                        }
                        *gv += acc;
                    }
                }
            }
        }
    }
    Tensor3::from_vec(h, w, cin, gin).expect("conv grad shape")
}

/// Accumulate weight and bias gradients of a same-padded convolution.
pub fn conv2d_backward_params(input: &Tensor3, grad_out: &Tensor3, k: usize, gw: &mut [f64], gb: &mut [f64]) {
    let (h, w, cin) = input.shape();
    let cout = grad_out.channels();
    let pad = k / 2;
    let src = input.as_slice();
    let go = grad_out.as_slice();
    for y in 0..h {
        for x in 0..w {
            let g = &go[(y * w + x) * cout..(y * w + x + 1) * cout];
            for (b, &gv) in gb.iter_mut().zip(g) {
                *b += gv;
            }
            for ky in 0..k {
                let iy = y + ky;
                if iy < pad || iy - pad >= h {
                    continue;
                }
                let iy = iy - pad;
                for kx in 0..k {
                    let ix = x + kx;
                    if ix < pad || ix - pad >= w {
                        continue;
                    }
                    let ix = ix - pad;
                    let px = &src[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    let tap = &mut gw[(ky * k + kx) * cin * cout..(ky * k + kx + 1) * cin * cout];
                    for (ci, &v) in px.iter().enumerate() {
                        let row = &mut tap[ci * cout..(ci + 1) * cout];
                        for (r, &gv) in row.iter_mut().zip(g) {
                            *r += v * gv;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn silu(x: &Tensor3) -> Tensor3 {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward(x: &Tensor3, grad_out: &Tensor3) -> Tensor3 {
    x.zip_map(grad_out, |v, g| {
        let s = sigmoid(v);
        g * s * (1.0 + v * (1.0 - s))
    })
}

pub(crate) fn silu_slice(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub(crate) fn silu_slice_backward(x: &[f64], g: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .map(|(&v, &gv)| {
            let s = sigmoid(v);
            gv * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

/// Fold each `f x f` block into the channel axis. Channel order is
/// `(dy, dx, c)`.
pub fn space_to_depth(x: &Tensor3, f: usize) -> Tensor3 {
    let (h, w, c) = x.shape();
    let (oh, ow, oc) = (h / f, w / f, c * f * f);
    let mut out = Tensor3::zeros(oh, ow, oc);
    let dst = out.as_mut_slice();
    let src = x.as_slice();
    for oy in 0..oh {
        for ox in 0..ow {
            for dy in 0..f {
                for dx in 0..f {
                    let s = ((oy * f + dy) * w + ox * f + dx) * c;
                    let d = (oy * ow + ox) * oc + (dy * f + dx) * c;
                    dst[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
    }
    out
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor3, f: usize) -> Tensor3 {
    let (h, w, c) = x.shape();
    let oc = c / (f * f);
    let (oh, ow) = (h * f, w * f);
    let mut out = Tensor3::zeros(oh, ow, oc);
    let dst = out.as_mut_slice();
    let src = x.as_slice();
    for y in 0..h {
        for xx in 0..w {
            for dy in 0..f {
                for dx in 0..f {
                    let s = (y * w + xx) * c + (dy * f + dx) * oc;
                    let d = ((y * f + dy) * ow + xx * f + dx) * oc;
                    dst[d..d + oc].copy_from_slice(&src[s..s + oc]);
                }
            }
        }
    }
    out
}

/// Transformer-style sinusoidal embedding of a scalar timestep.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}

fn gaussian_init<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Low-rank factors attached to a weight matrix of shape `rows x cols`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraFactors {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
}

impl LoraFactors {
    /// `A` is Gaussian, `B` is zero, so the attached delta starts at zero.
    pub fn attach<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        cols: usize,
        rank: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let a = store.push(
            format!("{name}.lora_a"),
            vec![rows, rank],
            ParamRole::AdapterA,
            gaussian_init(rows * rank, (1.0 / rows as f64).sqrt(), rng),
        );
        let b = store.push(
            format!("{name}.lora_b"),
            vec![rank, cols],
            ParamRole::AdapterB,
            vec![0.0; rank * cols],
        );
        Self { a, b, rank, scale }
    }

    /// `scale * A * B` as a row-major `rows x cols` matrix.
    pub fn delta(&self, store: &ParamStore, rows: usize, cols: usize) -> Vec<f64> {
        let a = store.get(self.a);
        let b = store.get(self.b);
        let r = self.rank;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let o = &mut out[i * cols..(i + 1) * cols];
            for k in 0..r {
                let av = a[i * r + k] * self.scale;
                if av == 0.0 {
                    continue;
                }
                for (ov, &bv) in o.iter_mut().zip(&b[k * cols..(k + 1) * cols]) {
                    *ov += av * bv;
                }
            }
        }
        out
    }

    /// Chain a gradient on the merged weight into the two factors.
    pub fn backward(&self, store: &ParamStore, grad_w: &[f64], rows: usize, cols: usize, grads: &mut Grads) {
        let a = store.get(self.a);
        let b = store.get(self.b);
        let r = self.rank;
        let s = self.scale;
        {
            let ga = grads.get_mut(self.a);
            for i in 0..rows {
                let gw = &grad_w[i * cols..(i + 1) * cols];
                for k in 0..r {
                    let bk = &b[k * cols..(k + 1) * cols];
                    let mut acc = 0.0;
                    for (&x, &y) in gw.iter().zip(bk) {
                        acc += x * y;
                    }
                    ga[i * r + k] += s * acc;
                }
            }
        }
        let gb = grads.get_mut(self.b);
        for i in 0..rows {
            let gw = &grad_w[i * cols..(i + 1) * cols];
            for k in 0..r {
                let av = s * a[i * r + k];
                if av == 0.0 {
                    continue;
                }
                for (g, &x) in gb[k * cols..(k + 1) * cols].iter_mut().zip(gw) {
                    *g += av * x;
                }
            }
        }
    }
}

/// A convolution whose weights live in a [`ParamStore`], with an optional
/// low-rank adapter merged at call time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub name: String,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub lora: Option<LoraFactors>,
}

impl ConvLayer {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (k * k * cin) as f64;
        let weight = store.push(
            format!("{name}.weight"),
            vec![k, k, cin, cout],
            ParamRole::Base,
            gaussian_init(k * k * cin * cout, gain / fan_in.sqrt(), rng),
        );
        let bias = store.push(format!("{name}.bias"), vec![cout], ParamRole::Base, vec![0.0; cout]);
        Self {
            name: name.to_string(),
            k,
            cin,
            cout,
            weight,
            bias,
            lora: None,
        }
    }

    /// Rows of the weight viewed as a matrix (`k*k*cin`).
    pub fn rows(&self) -> usize {
        self.k * self.k * self.cin
    }

    pub fn attach_lora<R: Rng + ?Sized>(&mut self, store: &mut ParamStore, rank: usize, scale: f64, rng: &mut R) {
        self.lora = Some(LoraFactors::attach(store, &self.name, self.rows(), self.cout, rank, scale, rng));
    }

    pub fn effective_weight<'a>(&self, store: &'a ParamStore) -> Cow<'a, [f64]> {
        let base = store.get(self.weight);
        match &self.lora {
            None => Cow::Borrowed(base),
            Some(l) => {
                let mut w = l.delta(store, self.rows(), self.cout);
                for (d, &b) in w.iter_mut().zip(base) {
                    *d += b;
                }
                Cow::Owned(w)
            }
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor3) -> Tensor3 {
        let w = self.effective_weight(store);
        conv2d_forward(x, &w, store.get(self.bias), self.k, self.cout)
    }

    /// Returns the input gradient; accumulates parameter gradients when
    /// `grads` is given.
    pub fn backward(&self, store: &ParamStore, x: &Tensor3, grad_out: &Tensor3, grads: Option<&mut Grads>) -> Tensor3 {
        let w = self.effective_weight(store);
        let gin = conv2d_backward_input(grad_out, &w, self.k, self.cin);
        if let Some(grads) = grads {
            let mut gw = vec![0.0; w.len()];
            let mut gb = vec![0.0; self.cout];
            conv2d_backward_params(x, grad_out, self.k, &mut gw, &mut gb);
            if let Some(l) = &self.lora {
                l.backward(store, &gw, self.rows(), self.cout, grads);
            }
            for (g, v) in grads.get_mut(self.weight).iter_mut().zip(&gw) {
                *g += v;
            }
            for (g, v) in grads.get_mut(self.bias).iter_mut().zip(&gb) {
                *g += v;
            }
        }
        gin
    }
}

/// Fully connected layer on plain vectors: `y = x W + b`, `W` is `[in][out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub din: usize,
    pub dout: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseLayer {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, din: usize, dout: usize, gain: f64, rng: &mut R) -> Self {
        let weight = store.push(
            format!("{name}.weight"),
            vec![din, dout],
            ParamRole::Base,
            gaussian_init(din * dout, gain / (din as f64).sqrt(), rng),
        );
        let bias = store.push(format!("{name}.bias"), vec![dout], ParamRole::Base, vec![0.0; dout]);
        Self { din, dout, weight, bias }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.get(self.weight);
        let mut y = store.get(self.bias).to_vec();
        for (i, &xv) in x.iter().enumerate() {
            for (yv, &wv) in y.iter_mut().zip(&w[i * self.dout..(i + 1) * self.dout]) {
                *yv += xv * wv;
            }
        }
        y
    }

    pub fn backward(&self, store: &ParamStore, x: &[f64], g: &[f64], grads: Option<&mut Grads>) -> Vec<f64> {
        let w = store.get(self.weight);
        let gx = (0..self.din)
            .map(|i| {
                w[i * self.dout..(i + 1) * self.dout]
                    .iter()
                    .zip(g)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        if let Some(grads) = grads {
            let gw = grads.get_mut(self.weight);
            for (i, &xv) in x.iter().enumerate() {
                for (gv, &go) in gw[i * self.dout..(i + 1) * self.dout].iter_mut().zip(g) {
                    *gv += xv * go;
                }
            }
            for (gb, &go) in grads.get_mut(self.bias).iter_mut().zip(g) {
                *gb += go;
            }
        }
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_loss(y: &Tensor3, probe: &Tensor3) -> f64 {
        y.dot(probe)
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let conv = ConvLayer::init(&mut store, "c", 3, 2, 3, 1.0, &mut rng);
        let x = Tensor3::randn(5, 4, 2, &mut rng);
        let probe = Tensor3::randn(5, 4, 3, &mut rng);
        let gin = conv.backward(&store, &x, &probe, None);
        let h = 1e-6;
        for i in [0, 7, 13, 39] {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= h;
            let fd = (scalar_loss(&conv.forward(&store, &xp), &probe)
                - scalar_loss(&conv.forward(&store, &xm), &probe))
                / (2.0 * h);
            assert!((fd - gin.as_slice()[i]).abs() < 1e-7, "{fd} vs {}", gin.as_slice()[i]);
        }
    }

    #[test]
    fn conv_weight_and_lora_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mut conv = ConvLayer::init(&mut store, "c", 3, 2, 2, 1.0, &mut rng);
        conv.attach_lora(&mut store, 2, 0.7, &mut rng);
        // make B nonzero so both factor gradients are informative
        let lb = conv.lora.unwrap().b;
        for (i, v) in store.get_mut(lb).iter_mut().enumerate() {
            *v = 0.1 * (i as f64 - 1.5);
        }
        let x = Tensor3::randn(4, 4, 2, &mut rng);
        let probe = Tensor3::randn(4, 4, 2, &mut rng);
        let mut grads = Grads::zeros_like(&store);
        conv.backward(&store, &x, &probe, Some(&mut grads));
        let h = 1e-6;
        for id in [conv.weight, conv.bias, conv.lora.unwrap().a, lb] {
            for i in 0..store.get(id).len().min(5) {
                let mut sp = store.clone();
                sp.get_mut(id)[i] += h;
                let mut sm = store.clone();
                sm.get_mut(id)[i] -= h;
                let fd = (scalar_loss(&conv.forward(&sp, &x), &probe)
                    - scalar_loss(&conv.forward(&sm, &x), &probe))
                    / (2.0 * h);
                let an = grads.get(id)[i];
                assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let d = DenseLayer::init(&mut store, "d", 4, 3, 1.0, &mut rng);
        let x = vec![0.3, -1.0, 0.5, 2.0];
        let g = vec![1.0, -0.5, 0.25];
        let mut grads = Grads::zeros_like(&store);
        let gx = d.backward(&store, &x, &g, Some(&mut grads));
        let f = |s: &ParamStore, x: &[f64]| d.forward(s, x).iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            assert!(((f(&store, &xp) - f(&store, &xm)) / (2.0 * h) - gx[i]).abs() < 1e-8);
        }
        let mut sp = store.clone();
        sp.get_mut(d.weight)[5] += h;
        let mut sm = store.clone();
        sm.get_mut(d.weight)[5] -= h;
        let fd = (f(&sp, &x) - f(&sm, &x)) / (2.0 * h);
        assert!((fd - grads.get(d.weight)[5]).abs() < 1e-8);
    }

    #[test]
    fn depth_space_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor3::randn(6, 4, 3, &mut rng);
        let s = space_to_depth(&x, 2);
        assert_eq!(s.shape(), (3, 2, 12));
        assert_eq!(depth_to_space(&s, 2), x);
    }

    #[test]
    fn fresh_lora_has_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let mut conv = ConvLayer::init(&mut store, "c", 1, 8, 8, 1.0, &mut rng);
        conv.attach_lora(&mut store, 4, 1.0, &mut rng);
        let l = conv.lora.unwrap();
        assert!(l.delta(&store, 8, 8).iter().all(|&v| v == 0.0));
        assert_eq!(store.get(l.a).len() + store.get(l.b).len(), 2 * 4 * 8);
    }
}
