//! Desk-scale UNet noise predictor.
//!
//! Two downsampling stages, a middle block and two upsampling stages with
//! skip connections. Every residual block receives a per-channel bias from
//! the timestep embedding plus a learned condition-token embedding.
//!
//! In [`MemoryMode::Recompute`] the down, mid and up blocks keep only their
//! inputs after the forward pass and rebuild their internals during
//! backward, which yields bit-identical gradients with a lower activation
//! peak.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EpsilonModel;
use crate::nn::{
    depth_to_space, silu, silu_backward, sinusoidal_embedding, space_to_depth, Activations, ConvLayer,
    DenseLayer, Grads, MemoryMode, ParamId, ParamRole, ParamStore,
};
use crate::nn::{silu_slice, silu_slice_backward};
use crate::tensor::Tensor3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnetConfig {
    pub latent_channels: usize,
    /// Channels at full latent resolution.
    pub base_channels: usize,
    /// Channels at the two coarser resolutions.
    pub inner_channels: usize,
    pub embed_dim: usize,
    pub time_features: usize,
    pub condition_vocab: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_channels: 16,
            inner_channels: 32,
            embed_dim: 32,
            time_features: 32,
            condition_vocab: 2,
        }
    }
}

impl UnetConfig {
    /// Tiny variant for gradient checks.
    pub fn micro(latent_channels: usize) -> Self {
        Self {
            latent_channels,
            base_channels: 4,
            inner_channels: 4,
            embed_dim: 4,
            time_features: 4,
            condition_vocab: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ResBlock {
    conv1: ConvLayer,
    conv2: ConvLayer,
    skip: Option<ConvLayer>,
    proj: DenseLayer,
}

struct ResCache {
    x: Tensor3,
    a: Tensor3,
    h: Tensor3,
    b: Tensor3,
}

impl ResCache {
    fn values(&self) -> usize {
        self.x.len() + self.a.len() + self.h.len() + self.b.len()
    }
}

impl ResBlock {
    fn init(store: &mut ParamStore, name: &str, cin: usize, cout: usize, emb: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: ConvLayer::init(store, &format!("{name}.conv1"), 3, cin, cout, 1.0, rng),
            conv2: ConvLayer::init(store, &format!("{name}.conv2"), 3, cout, cout, 0.3, rng),
            skip: (cin != cout).then(|| ConvLayer::init(store, &format!("{name}.skip"), 1, cin, cout, 1.0, rng)),
            proj: DenseLayer::init(store, &format!("{name}.emb_proj"), emb, cout, 1.0, rng),
        }
    }

    fn convs_mut(&mut self) -> Vec<&mut ConvLayer> {
        let mut v = vec![&mut self.conv1, &mut self.conv2];
        if let Some(s) = self.skip.as_mut() {
            v.push(s);
        }
        v
    }

    fn forward(&self, ps: &ParamStore, x: &Tensor3, e_act: &[f64]) -> (Tensor3, ResCache) {
        let a = silu(x);
        let mut h = self.conv1.forward(ps, &a);
        let bias = self.proj.forward(ps, e_act);
        let c = h.channels();
        for (i, v) in h.as_mut_slice().iter_mut().enumerate() {
            *v += bias[i % c];
        }
        let b = silu(&h);
        let mut out = self.conv2.forward(ps, &b);
        match &self.skip {
            Some(s) => out.add_assign(&s.forward(ps, x)),
            None => out.add_assign(x),
        }
        (
            out,
            ResCache {
                x: x.clone(),
                a,
                h,
                b,
            },
        )
    }

    /// Returns `(grad_x, grad_e_act)`.
    fn backward(
        &self,
        ps: &ParamStore,
        cache: &ResCache,
        g: &Tensor3,
        e_act: &[f64],
        mut grads: Option<&mut Grads>,
    ) -> (Tensor3, Vec<f64>) {
        let gb = self.conv2.backward(ps, &cache.b, g, grads.as_deref_mut());
        let gh = silu_backward(&cache.h, &gb);
        let c = gh.channels();
        let mut gbias = vec![0.0; c];
        for (i, v) in gh.as_slice().iter().enumerate() {
            gbias[i % c] += v;
        }
        let ge = self.proj.backward(ps, e_act, &gbias, grads.as_deref_mut());
        let ga = self.conv1.backward(ps, &cache.a, &gh, grads.as_deref_mut());
        let mut gx = silu_backward(&cache.x, &ga);
        match &self.skip {
            Some(s) => gx.add_assign(&s.backward(ps, &cache.x, g, grads)),
            None => gx.add_assign(g),
        }
        (gx, ge)
    }
}

/// Residual block followed by space-to-depth and a 1x1 projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DownBlock {
    res: ResBlock,
    down: ConvLayer,
}

struct DownCache {
    res: ResCache,
    folded: Tensor3,
}

impl DownBlock {
    /// Returns `(skip, downsampled)`.
    fn forward(&self, ps: &ParamStore, x: &Tensor3, e: &[f64]) -> (Tensor3, Tensor3, DownCache) {
        let (r, res) = self.res.forward(ps, x, e);
        let folded = space_to_depth(&r, 2);
        let d = self.down.forward(ps, &folded);
        (r, d, DownCache { res, folded })
    }

    fn backward(
        &self,
        ps: &ParamStore,
        c: &DownCache,
        g_skip: &Tensor3,
        g_down: &Tensor3,
        e: &[f64],
        mut grads: Option<&mut Grads>,
    ) -> (Tensor3, Vec<f64>) {
        let gf = self.down.backward(ps, &c.folded, g_down, grads.as_deref_mut());
        let mut gr = depth_to_space(&gf, 2);
        gr.add_assign(g_skip);
        self.res.backward(ps, &c.res, &gr, e, grads)
    }
}

/// 1x1 projection, depth-to-space, concatenation with the skip, residual block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct UpBlock {
    up: ConvLayer,
    res: ResBlock,
    up_channels: usize,
}

struct UpCache {
    x: Tensor3,
    res: ResCache,
}

impl UpBlock {
    fn forward(&self, ps: &ParamStore, x: &Tensor3, skip: &Tensor3, e: &[f64]) -> (Tensor3, UpCache) {
        let u = depth_to_space(&self.up.forward(ps, x), 2);
        let cat = Tensor3::concat_channels(&u, skip);
        let (out, res) = self.res.forward(ps, &cat, e);
        (out, UpCache { x: x.clone(), res })
    }

    /// Returns `(grad_x, grad_skip, grad_e_act)`.
    fn backward(
        &self,
        ps: &ParamStore,
        c: &UpCache,
        g: &Tensor3,
        e: &[f64],
        mut grads: Option<&mut Grads>,
    ) -> (Tensor3, Tensor3, Vec<f64>) {
        let (gcat, ge) = self.res.backward(ps, &c.res, g, e, grads.as_deref_mut());
        let (gu, gskip) = gcat.split_channels(self.up_channels);
        let gx = self.up.backward(ps, &c.x, &space_to_depth(&gu, 2), grads);
        (gx, gskip, ge)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Embedding {
    time1: DenseLayer,
    time2: DenseLayer,
    cond: ParamId,
    time_features: usize,
    dim: usize,
}

struct EmbCache {
    cond: usize,
    feat: Vec<f64>,
    h1: Vec<f64>,
    a1: Vec<f64>,
    e: Vec<f64>,
}

impl Embedding {
    fn forward(&self, ps: &ParamStore, t: usize, cond: usize) -> (Vec<f64>, EmbCache) {
        let feat = sinusoidal_embedding(t as f64, self.time_features);
        let h1 = self.time1.forward(ps, &feat);
        let a1 = silu_slice(&h1);
        let mut e = self.time2.forward(ps, &a1);
        let table = ps.get(self.cond);
        for (v, c) in e.iter_mut().zip(&table[cond * self.dim..(cond + 1) * self.dim]) {
            *v += c;
        }
        let e_act = silu_slice(&e);
        (
            e_act,
            EmbCache {
                cond,
                feat,
                h1,
                a1,
                e,
            },
        )
    }

    fn backward(&self, ps: &ParamStore, c: &EmbCache, g_act: &[f64], grads: &mut Grads) {
        let ge = silu_slice_backward(&c.e, g_act);
        let row = &mut grads.get_mut(self.cond)[c.cond * self.dim..(c.cond + 1) * self.dim];
        for (r, g) in row.iter_mut().zip(&ge) {
            *r += g;
        }
        let ga1 = self.time2.backward(ps, &c.a1, &ge, Some(grads));
        let gh1 = silu_slice_backward(&c.h1, &ga1);
        self.time1.backward(ps, &c.feat, &gh1, Some(grads));
    }
}

/// A block's saved state: everything, or only what is needed to rebuild it.
enum Saved<T, I> {
    Full(T),
    Inputs(I),
}

pub struct UnetCache {
    emb: EmbCache,
    e_act: Vec<f64>,
    z: Tensor3,
    down1: Saved<DownCache, Tensor3>,
    down2: Saved<DownCache, Tensor3>,
    mid: Saved<ResCache, Tensor3>,
    up2: Saved<UpCache, (Tensor3, Tensor3)>,
    up1: Saved<UpCache, (Tensor3, Tensor3)>,
    head_in: Tensor3,
    head_act: Tensor3,
    retained: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyUnet {
    config: UnetConfig,
    params: ParamStore,
    emb: Embedding,
    conv_in: ConvLayer,
    down1: DownBlock,
    down2: DownBlock,
    mid: ResBlock,
    up2: UpBlock,
    up1: UpBlock,
    conv_out: ConvLayer,
}

impl ToyUnet {
    pub fn new(config: UnetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let (c, c0, c1, e) = (
            config.latent_channels,
            config.base_channels,
            config.inner_channels,
            config.embed_dim,
        );
        let time1 = DenseLayer::init(&mut ps, "emb.time1", config.time_features, e, 1.0, &mut rng);
        let time2 = DenseLayer::init(&mut ps, "emb.time2", e, e, 1.0, &mut rng);
        let cond_init = (0..config.condition_vocab * e)
            .map(|_| 0.1 * rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal))
            .collect();
        let cond = ps.push("emb.cond", vec![config.condition_vocab, e], ParamRole::Base, cond_init);
        let emb = Embedding {
            time1,
            time2,
            cond,
            time_features: config.time_features,
            dim: e,
        };
        let conv_in = ConvLayer::init(&mut ps, "conv_in", 3, c, c0, 1.0, &mut rng);
        let down1 = DownBlock {
            res: ResBlock::init(&mut ps, "down1.res", c0, c0, e, &mut rng),
            down: ConvLayer::init(&mut ps, "down1.down", 1, 4 * c0, c1, 1.0, &mut rng),
        };
        let down2 = DownBlock {
            res: ResBlock::init(&mut ps, "down2.res", c1, c1, e, &mut rng),
            down: ConvLayer::init(&mut ps, "down2.down", 1, 4 * c1, c1, 1.0, &mut rng),
        };
        let mid = ResBlock::init(&mut ps, "mid", c1, c1, e, &mut rng);
        let up2 = UpBlock {
            up: ConvLayer::init(&mut ps, "up2.up", 1, c1, 4 * c1, 1.0, &mut rng),
            res: ResBlock::init(&mut ps, "up2.res", 2 * c1, c1, e, &mut rng),
            up_channels: c1,
        };
        let up1 = UpBlock {
            up: ConvLayer::init(&mut ps, "up1.up", 1, c1, 4 * c0, 1.0, &mut rng),
            res: ResBlock::init(&mut ps, "up1.res", 2 * c0, c0, e, &mut rng),
            up_channels: c0,
        };
        let conv_out = ConvLayer::init(&mut ps, "conv_out", 3, c0, c, 0.1, &mut rng);
        Self {
            config,
            params: ps,
            emb,
            conv_in,
            down1,
            down2,
            mid,
            up2,
            up1,
            conv_out,
        }
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    fn convs_mut(&mut self) -> Vec<&mut ConvLayer> {
        let mut v = vec![&mut self.conv_in];
        v.extend(self.down1.res.convs_mut());
        v.push(&mut self.down1.down);
        v.extend(self.down2.res.convs_mut());
        v.push(&mut self.down2.down);
        v.extend(self.mid.convs_mut());
        v.push(&mut self.up2.up);
        v.extend(self.up2.res.convs_mut());
        v.push(&mut self.up1.up);
        v.extend(self.up1.res.convs_mut());
        v.push(&mut self.conv_out);
        v
    }

    /// Rank of the attached adapters, if any.
    pub fn adapter_rank(&self) -> Option<usize> {
        self.conv_in.lora.map(|l| l.rank)
    }

    /// Fold adapter deltas into the base weights and drop the adapters.
    pub fn merge_adapters(&mut self) {
        let mut params = std::mem::take(&mut self.params);
        for conv in self.convs_mut() {
            if let Some(l) = conv.lora.take() {
                let delta = l.delta(&params, conv.rows(), conv.cout);
                for (w, d) in params.get_mut(conv.weight).iter_mut().zip(&delta) {
                    *w += d;
                }
            }
        }
        let mut kept = ParamStore::new();
        for p in params.iter().filter(|p| !p.role.is_adapter()) {
            kept.push(p.name.clone(), p.shape.clone(), p.role, p.data.clone());
        }
        self.params = kept;
    }

    fn check_input(&self, z: &Tensor3, cond: usize) {
        let (h, w, c) = z.shape();
        assert_eq!(c, self.config.latent_channels, "latent channel mismatch");
        assert!(h % 4 == 0 && w % 4 == 0, "latent side must be divisible by 4");
        assert!(cond < self.config.condition_vocab, "condition id out of vocabulary");
    }

    fn run(&self, z: &Tensor3, t: usize, cond: usize, acts: &mut Activations) -> (Tensor3, UnetCache) {
        self.check_input(z, cond);
        let ps = &self.params;
        let recompute = acts.mode() == MemoryMode::Recompute;
        let mut retained = 0usize;
        let mut keep = |acts: &mut Activations, n: usize| {
            acts.retain(n);
            retained += n;
        };

        let (e, emb) = self.emb.forward(ps, t, cond);
        let h0 = self.conv_in.forward(ps, z);
        keep(acts, z.len());

        let (r1, d1, c1) = self.down1.forward(ps, &h0, &e);
        let down1 = if recompute {
            keep(acts, h0.len());
            Saved::Inputs(h0)
        } else {
            keep(acts, c1.res.values() + c1.folded.len());
            Saved::Full(c1)
        };
        let (r2, d2, c2) = self.down2.forward(ps, &d1, &e);
        let down2 = if recompute {
            keep(acts, d1.len());
            Saved::Inputs(d1)
        } else {
            keep(acts, c2.res.values() + c2.folded.len());
            Saved::Full(c2)
        };
        let (m, cm) = self.mid.forward(ps, &d2, &e);
        let mid = if recompute {
            keep(acts, d2.len());
            Saved::Inputs(d2)
        } else {
            keep(acts, cm.values());
            Saved::Full(cm)
        };
        let (o2, cu2) = self.up2.forward(ps, &m, &r2, &e);
        let up2 = if recompute {
            keep(acts, m.len() + r2.len());
            Saved::Inputs((m, r2))
        } else {
            keep(acts, cu2.x.len() + cu2.res.values());
            Saved::Full(cu2)
        };
        let (o1, cu1) = self.up1.forward(ps, &o2, &r1, &e);
        let up1 = if recompute {
            keep(acts, o2.len() + r1.len());
            Saved::Inputs((o2, r1))
        } else {
            keep(acts, cu1.x.len() + cu1.res.values());
            Saved::Full(cu1)
        };
        let head_act = silu(&o1);
        let out = self.conv_out.forward(ps, &head_act);
        keep(acts, o1.len() + head_act.len());
        (
            out,
            UnetCache {
                emb,
                e_act: e,
                z: z.clone(),
                down1,
                down2,
                mid,
                up2,
                up1,
                head_in: o1,
                head_act,
                retained,
            },
        )
    }

    fn run_backward(
        &self,
        cache: UnetCache,
        g: &Tensor3,
        mut grads: Option<&mut Grads>,
        acts: &mut Activations,
    ) -> Tensor3 {
        let ps = &self.params;
        let e = &cache.e_act;
        let mut ge = vec![0.0; e.len()];
        let add = |acc: &mut Vec<f64>, v: Vec<f64>| {
            for (a, b) in acc.iter_mut().zip(v) {
                *a += b;
            }
        };

        let g_head = self.conv_out.backward(ps, &cache.head_act, g, grads.as_deref_mut());
        let g_o1 = silu_backward(&cache.head_in, &g_head);

        let cu1 = match cache.up1 {
            Saved::Full(c) => c,
            Saved::Inputs((x, skip)) => {
                let (_, c) = self.up1.forward(ps, &x, &skip, e);
                acts.retain(c.x.len() + c.res.values());
                acts.release(c.x.len() + c.res.values());
                c
            }
        };
        let (g_o2, g_r1, g) = self.up1.backward(ps, &cu1, &g_o1, e, grads.as_deref_mut());
        add(&mut ge, g);
        drop(cu1);

        let cu2 = match cache.up2 {
            Saved::Full(c) => c,
            Saved::Inputs((x, skip)) => {
                let (_, c) = self.up2.forward(ps, &x, &skip, e);
                acts.retain(c.x.len() + c.res.values());
                acts.release(c.x.len() + c.res.values());
                c
            }
        };
        let (g_m, g_r2, g) = self.up2.backward(ps, &cu2, &g_o2, e, grads.as_deref_mut());
        add(&mut ge, g);
        drop(cu2);

        let cm = match cache.mid {
            Saved::Full(c) => c,
            Saved::Inputs(x) => {
                let (_, c) = self.mid.forward(ps, &x, e);
                acts.retain(c.values());
                acts.release(c.values());
                c
            }
        };
        let (g_d2, g) = self.mid.backward(ps, &cm, &g_m, e, grads.as_deref_mut());
        add(&mut ge, g);
        drop(cm);

        let c2 = match cache.down2 {
            Saved::Full(c) => c,
            Saved::Inputs(x) => {
                let (_, _, c) = self.down2.forward(ps, &x, e);
                acts.retain(c.res.values() + c.folded.len());
                acts.release(c.res.values() + c.folded.len());
                c
            }
        };
        let (g_d1, g) = self.down2.backward(ps, &c2, &g_r2, &g_d2, e, grads.as_deref_mut());
        add(&mut ge, g);
        drop(c2);

        let c1 = match cache.down1 {
            Saved::Full(c) => c,
            Saved::Inputs(x) => {
                let (_, _, c) = self.down1.forward(ps, &x, e);
                acts.retain(c.res.values() + c.folded.len());
                acts.release(c.res.values() + c.folded.len());
                c
            }
        };
        let (g_h0, g) = self.down1.backward(ps, &c1, &g_r1, &g_d1, e, grads.as_deref_mut());
        add(&mut ge, g);
        drop(c1);

        let gz = self.conv_in.backward(ps, &cache.z, &g_h0, grads.as_deref_mut());
        if let Some(grads) = grads {
            self.emb.backward(ps, &cache.emb, &ge, grads);
        }
        acts.release(cache.retained);
        gz
    }
}

impl EpsilonModel for ToyUnet {
    type Cache = UnetCache;

    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn condition_vocab(&self) -> usize {
        self.config.condition_vocab
    }

    fn predict(&self, z: &Tensor3, t: usize, cond: usize) -> Tensor3 {
        let mut acts = Activations::new(MemoryMode::Standard);
        self.run(z, t, cond, &mut acts).0
    }

    fn forward_train(&self, z: &Tensor3, t: usize, cond: usize, acts: &mut Activations) -> (Tensor3, UnetCache) {
        self.run(z, t, cond, acts)
    }

    fn backward(&self, cache: UnetCache, grad_out: &Tensor3, grads: Option<&mut Grads>, acts: &mut Activations) -> Tensor3 {
        self.run_backward(cache, grad_out, grads, acts)
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn attach_adapters(&mut self, rank: usize, seed: u64) -> Result<usize> {
        if rank == 0 {
            return Err(Error::invalid("adapter rank must be positive"));
        }
        if self.adapter_rank().is_some() {
            return Err(Error::invalid("adapters already attached"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = std::mem::take(&mut self.params);
        let before = params.scalar_count(|_| true);
        for conv in self.convs_mut() {
            conv.attach_lora(&mut params, rank, 1.0, &mut rng);
        }
        let added = params.scalar_count(|_| true) - before;
        self.params = params;
        Ok(added)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe(seed: u64, c: usize) -> (Tensor3, Tensor3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (Tensor3::randn(8, 8, c, &mut rng), Tensor3::randn(8, 8, c, &mut rng))
    }

    #[test]
    fn output_shape_matches_input() {
        let net = ToyUnet::new(UnetConfig::micro(3), 0);
        let (z, _) = probe(1, 3);
        assert_eq!(net.predict(&z, 10, 1).shape(), z.shape());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = ToyUnet::new(UnetConfig::micro(2), 3);
        let (z, g) = probe(2, 2);
        let mut acts = Activations::default();
        let (_, cache) = net.forward_train(&z, 321, 1, &mut acts);
        let gz = net.backward(cache, &g, None, &mut acts);
        let h = 1e-5;
        for i in [0, 17, 63, 100, 127] {
            let mut zp = z.clone();
            zp.as_mut_slice()[i] += h;
            let mut zm = z.clone();
            zm.as_mut_slice()[i] -= h;
            let fd = (net.predict(&zp, 321, 1).dot(&g) - net.predict(&zm, 321, 1).dot(&g)) / (2.0 * h);
            let an = gz.as_slice()[i];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "{i}: {fd} vs {an}");
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let mut net = ToyUnet::new(UnetConfig::micro(2), 4);
        net.attach_adapters(2, 9).unwrap();
        // give the zero-initialized B factors some mass
        for p in net.params_mut().iter_mut() {
            if p.role == ParamRole::AdapterB {
                for (i, v) in p.data.iter_mut().enumerate() {
                    *v = 0.05 * ((i % 7) as f64 - 3.0);
                }
            }
        }
        let (z, g) = probe(5, 2);
        let mut acts = Activations::default();
        let (_, cache) = net.forward_train(&z, 77, 0, &mut acts);
        let mut grads = Grads::zeros_like(net.params());
        net.backward(cache, &g, Some(&mut grads), &mut acts);
        let h = 1e-5;
        for pid in 0..net.params().len() {
            let id = ParamId(pid);
            let n = net.params().get(id).len();
            for i in [0, n / 2, n - 1] {
                let mut plus = net.clone();
                plus.params_mut().get_mut(id)[i] += h;
                let mut minus = net.clone();
                minus.params_mut().get_mut(id)[i] -= h;
                let fd = (plus.predict(&z, 77, 0).dot(&g) - minus.predict(&z, 77, 0).dot(&g)) / (2.0 * h);
                let an = grads.get(id)[i];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                    "{}[{i}]: {fd} vs {an}",
                    net.params().param(id).name
                );
            }
        }
    }

    #[test]
    fn recompute_mode_is_exact_and_leaner() {
        let net = ToyUnet::new(UnetConfig::default(), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = Tensor3::randn(16, 16, 4, &mut rng);
        let g = Tensor3::randn(16, 16, 4, &mut rng);
        let run = |mode| {
            let mut acts = Activations::new(mode);
            let (_, cache) = net.forward_train(&z, 500, 1, &mut acts);
            let mut grads = Grads::zeros_like(net.params());
            let gz = net.backward(cache, &g, Some(&mut grads), &mut acts);
            assert_eq!(acts.live_bytes(), 0);
            (gz, grads, acts.peak_bytes())
        };
        let (gz_s, gp_s, peak_s) = run(MemoryMode::Standard);
        let (gz_r, gp_r, peak_r) = run(MemoryMode::Recompute);
        assert_eq!(gz_s, gz_r);
        assert_eq!(gp_s, gp_r);
        assert!(peak_r < peak_s, "{peak_r} !< {peak_s}");
    }

    #[test]
    fn adapters_are_neutral_and_merge() {
        let mut net = ToyUnet::new(UnetConfig::micro(2), 8);
        let (z, _) = probe(9, 2);
        let before = net.predict(&z, 5, 1);
        let base_hash = net.base_hash();
        net.attach_adapters(3, 1).unwrap();
        assert_eq!(net.predict(&z, 5, 1), before);
        assert!(net.attach_adapters(3, 1).is_err());
        assert_eq!(net.base_hash(), base_hash);
        for p in net.params_mut().iter_mut() {
            if p.role == ParamRole::AdapterB {
                p.data.iter_mut().for_each(|v| *v = 0.01);
            }
        }
        let adapted = net.predict(&z, 5, 1);
        assert_ne!(adapted, before);
        net.merge_adapters();
        assert!(!net.has_adapters());
        assert!(net.predict(&z, 5, 1).max_abs_diff(&adapted) < 1e-12);
    }
}
