//! Conditional encoder-decoder noise predictor with skip connections.
//!
//! A small U-Net over [3, side, side] grids (side divisible by 8). Timestep
//! and conditioning code pass through learned embeddings whose sum is
//! injected into every residual block as a per-channel bias. The backward
//! pass returns the gradient with respect to the conditioning code so the
//! semantic encoder can train through it.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{timestep_embedding, NoisePredictor};
use crate::imageio::Pixels;
use crate::nn::norm::GnCache;
use crate::nn::{silu, silu_backward, Conv2d, GroupNorm, Layout, Linear, Upsample2x};
use crate::rng::stream_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Channel widths at full, /2, /4 and /8 resolution.
    pub channels: [usize; 4],
    pub emb_dim: usize,
    pub cond_dim: usize,
    pub in_channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            channels: [12, 24, 48, 96],
            emb_dim: 64,
            cond_dim: 66,
            in_channels: 3,
        }
    }
}

fn pick_groups(c: usize) -> usize {
    for g in [8, 4, 2, 1] {
        if c.is_multiple_of(g) {
            return g;
        }
    }
    1
}

struct ResBlock {
    gn_a: GroupNorm,
    conv_a: Conv2d,
    proj: Linear,
    gn_b: GroupNorm,
    conv_b: Conv2d,
    skip: Option<Conv2d>,
}

struct ResBlockCache {
    x: Array3<f64>,
    gn_a_c: GnCache,
    a: Array3<f64>,
    a_s: Array3<f64>,
    h1b: Array3<f64>,
    gn_b_c: GnCache,
    b: Array3<f64>,
    b_s: Array3<f64>,
}

impl ResBlock {
    fn new(l: &mut Layout, cin: usize, cout: usize, emb_dim: usize) -> Self {
        ResBlock {
            gn_a: GroupNorm::new(l, cin, pick_groups(cin)),
            conv_a: Conv2d::new(l, cin, cout, 3, 1, 1),
            proj: Linear::new(l, emb_dim, cout),
            gn_b: GroupNorm::new(l, cout, pick_groups(cout)),
            conv_b: Conv2d::new(l, cout, cout, 3, 1, 1),
            skip: if cin != cout {
                Some(Conv2d::new(l, cin, cout, 1, 1, 0))
            } else {
                None
            },
        }
    }

    fn init(&self, p: &mut [f64], rng: &mut ChaCha8Rng) {
        self.gn_a.init(p);
        self.conv_a.init(p, 2.0, rng);
        // zero-init the embedding projection and second conv so each block
        // starts close to identity
        self.proj.init(p, 0.0, rng);
        self.gn_b.init(p);
        self.conv_b.init(p, 0.0, rng);
        if let Some(sk) = &self.skip {
            sk.init(p, 1.0, rng);
        }
    }

    fn forward(&self, p: &[f64], x: Array3<f64>, emb_s: &[f64]) -> (Array3<f64>, ResBlockCache) {
        let (a, gn_a_c) = self.gn_a.forward(p, x.view());
        let mut a_s = a.clone();
        silu(a_s.as_slice_mut().expect("contiguous"));
        let mut h1b = self.conv_a.forward(p, a_s.view());
        let emb_row = ArrayView2::from_shape((1, emb_s.len()), emb_s).expect("emb row");
        let bias = self.proj.forward(p, emb_row); // [1, cout]
        for (c, mut plane) in h1b.outer_iter_mut().enumerate() {
            let bc = bias[[0, c]];
            for v in plane.iter_mut() {
                *v += bc;
            }
        }
        let (b, gn_b_c) = self.gn_b.forward(p, h1b.view());
        let mut b_s = b.clone();
        silu(b_s.as_slice_mut().expect("contiguous"));
        let h2 = self.conv_b.forward(p, b_s.view());
        let y = match &self.skip {
            Some(sk) => h2 + sk.forward(p, x.view()),
            None => h2 + &x,
        };
        (
            y,
            ResBlockCache {
                x,
                gn_a_c,
                a,
                a_s,
                h1b,
                gn_b_c,
                b,
                b_s,
            },
        )
    }

    fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        cache: &ResBlockCache,
        dy: Array3<f64>,
        emb_s: &[f64],
        demb_s: &mut [f64],
    ) -> Array3<f64> {
        let mut db_s = self.conv_b.backward(p, g, cache.b_s.view(), dy.view());
        silu_backward(
            cache.b.as_slice().expect("contiguous"),
            db_s.as_slice_mut().expect("contiguous"),
        );
        let dh1b = self.gn_b.backward(p, g, cache.h1b.view(), &cache.gn_b_c, db_s.view());
        // bias gradient per channel feeds the embedding projection
        let cout = dh1b.dim().0;
        let mut dbias = Array2::<f64>::zeros((1, cout));
        for (c, plane) in dh1b.outer_iter().enumerate() {
            dbias[[0, c]] = plane.sum();
        }
        let emb_row = ArrayView2::from_shape((1, emb_s.len()), emb_s).expect("emb row");
        let demb_row = self.proj.backward(p, g, emb_row, dbias.view());
        for (a, &b) in demb_s.iter_mut().zip(demb_row.row(0).iter()) {
            *a += b;
        }
        let mut da_s = self.conv_a.backward(p, g, cache.a_s.view(), dh1b.view());
        silu_backward(
            cache.a.as_slice().expect("contiguous"),
            da_s.as_slice_mut().expect("contiguous"),
        );
        let dx_main = self.gn_a.backward(p, g, cache.x.view(), &cache.gn_a_c, da_s.view());
        match &self.skip {
            Some(sk) => dx_main + sk.backward(p, g, cache.x.view(), dy.view()),
            None => dx_main + dy,
        }
    }
}

pub struct DenoiserNet {
    pub cfg: DenoiserConfig,
    lin_t1: Linear,
    lin_t2: Linear,
    lin_z1: Linear,
    lin_z2: Linear,
    stem: Conv2d,
    down0: Conv2d,
    rb0: ResBlock,
    down1: Conv2d,
    rb1: ResBlock,
    down2: Conv2d,
    rb2: ResBlock,
    rbm: ResBlock,
    up2: Conv2d,
    rbu2: ResBlock,
    up1: Conv2d,
    rbu1: ResBlock,
    up0: Conv2d,
    fuse: Conv2d,
    gn_out: GroupNorm,
    conv_out: Conv2d,
    n_params: usize,
}

struct EmbCache {
    se: Vec<f64>,
    cond: Vec<f64>,
    t1: Array2<f64>,
    t1a: Array2<f64>,
    z1: Array2<f64>,
    z1a: Array2<f64>,
    emb: Vec<f64>,
    emb_s: Vec<f64>,
}

pub struct DenoiserCache {
    emb: EmbCache,
    x0in: Array3<f64>,
    r0c: ResBlockCache,
    r0: Array3<f64>,
    r1c: ResBlockCache,
    r1: Array3<f64>,
    r2c: ResBlockCache,
    mc: ResBlockCache,
    m_up: Array3<f64>,
    ru2c: ResBlockCache,
    ru2_up: Array3<f64>,
    ru1c: ResBlockCache,
    ru1_up: Array3<f64>,
    cat0: Array3<f64>,
    f: Array3<f64>,
    gn_out_c: GnCache,
    og: Array3<f64>,
    os: Array3<f64>,
    x_in: Array3<f64>,
}

fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("channel concat")
}

impl DenoiserNet {
    pub fn new(cfg: DenoiserConfig) -> Self {
        assert!(cfg.emb_dim.is_multiple_of(2), "emb_dim must be even");
        let mut l = Layout::new();
        let [c0, c1, c2, c3] = cfg.channels;
        let e = cfg.emb_dim;
        let net = DenoiserNet {
            lin_t1: Linear::new(&mut l, e, e),
            lin_t2: Linear::new(&mut l, e, e),
            lin_z1: Linear::new(&mut l, cfg.cond_dim, e),
            lin_z2: Linear::new(&mut l, e, e),
            stem: Conv2d::new(&mut l, cfg.in_channels, c0, 3, 1, 1),
            down0: Conv2d::new(&mut l, c0, c1, 3, 2, 1),
            rb0: ResBlock::new(&mut l, c1, c1, e),
            down1: Conv2d::new(&mut l, c1, c2, 3, 2, 1),
            rb1: ResBlock::new(&mut l, c2, c2, e),
            down2: Conv2d::new(&mut l, c2, c3, 3, 2, 1),
            rb2: ResBlock::new(&mut l, c3, c3, e),
            rbm: ResBlock::new(&mut l, c3, c3, e),
            up2: Conv2d::new(&mut l, c3, c2, 3, 1, 1),
            rbu2: ResBlock::new(&mut l, 2 * c2, c2, e),
            up1: Conv2d::new(&mut l, c2, c1, 3, 1, 1),
            rbu1: ResBlock::new(&mut l, 2 * c1, c1, e),
            up0: Conv2d::new(&mut l, c1, c0, 3, 1, 1),
            fuse: Conv2d::new(&mut l, 2 * c0, c0, 3, 1, 1),
            gn_out: GroupNorm::new(&mut l, c0, pick_groups(c0)),
            conv_out: Conv2d::new(&mut l, c0, cfg.in_channels, 3, 1, 1),
            n_params: 0,
            cfg,
        };
        DenoiserNet {
            n_params: l.len(),
            ..net
        }
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        let mut rng = stream_from(seed);
        self.lin_t1.init(&mut p, 1.0, &mut rng);
        self.lin_t2.init(&mut p, 1.0, &mut rng);
        self.lin_z1.init(&mut p, 1.0, &mut rng);
        self.lin_z2.init(&mut p, 1.0, &mut rng);
        self.stem.init(&mut p, 2.0, &mut rng);
        self.down0.init(&mut p, 2.0, &mut rng);
        self.rb0.init(&mut p, &mut rng);
        self.down1.init(&mut p, 2.0, &mut rng);
        self.rb1.init(&mut p, &mut rng);
        self.down2.init(&mut p, 2.0, &mut rng);
        self.rb2.init(&mut p, &mut rng);
        self.rbm.init(&mut p, &mut rng);
        self.up2.init(&mut p, 2.0, &mut rng);
        self.rbu2.init(&mut p, &mut rng);
        self.up1.init(&mut p, 2.0, &mut rng);
        self.rbu1.init(&mut p, &mut rng);
        self.up0.init(&mut p, 2.0, &mut rng);
        self.fuse.init(&mut p, 2.0, &mut rng);
        self.gn_out.init(&mut p);
        // zero-init the head so the model starts by predicting zero noise
        self.conv_out.init(&mut p, 0.0, &mut rng);
        p
    }

    fn embed(&self, p: &[f64], t: usize, cond: &[f64]) -> EmbCache {
        assert_eq!(cond.len(), self.cfg.cond_dim, "conditioning width");
        let se = timestep_embedding(t, self.cfg.emb_dim);
        let se_row = ArrayView2::from_shape((1, se.len()), &se).expect("row");
        let t1 = self.lin_t1.forward(p, se_row);
        let mut t1a = t1.clone();
        silu(t1a.as_slice_mut().expect("contiguous"));
        let t2 = self.lin_t2.forward(p, t1a.view());
        let cond_row = ArrayView2::from_shape((1, cond.len()), cond).expect("row");
        let z1 = self.lin_z1.forward(p, cond_row);
        let mut z1a = z1.clone();
        silu(z1a.as_slice_mut().expect("contiguous"));
        let z2 = self.lin_z2.forward(p, z1a.view());
        let emb: Vec<f64> = t2
            .row(0)
            .iter()
            .zip(z2.row(0).iter())
            .map(|(a, b)| a + b)
            .collect();
        let mut emb_s = emb.clone();
        silu(&mut emb_s);
        EmbCache {
            se,
            cond: cond.to_vec(),
            t1,
            t1a,
            z1,
            z1a,
            emb,
            emb_s,
        }
    }

    pub fn forward_cached(&self, p: &[f64], x: &Pixels, t: usize, cond: &[f64]) -> (Pixels, DenoiserCache) {
        let emb = self.embed(p, t, cond);
        let x_in = x.clone();
        let x0in = self.stem.forward(p, x.view());
        let d0 = self.down0.forward(p, x0in.view());
        let (r0, r0c) = self.rb0.forward(p, d0, &emb.emb_s);
        let d1 = self.down1.forward(p, r0.view());
        let (r1, r1c) = self.rb1.forward(p, d1, &emb.emb_s);
        let d2 = self.down2.forward(p, r1.view());
        let (r2, r2c) = self.rb2.forward(p, d2, &emb.emb_s);
        let (m, mc) = self.rbm.forward(p, r2, &emb.emb_s);
        let m_up = Upsample2x::forward(m.view());
        let u2 = self.up2.forward(p, m_up.view());
        let cat2 = concat_channels(&u2, &r1);
        let (ru2, ru2c) = self.rbu2.forward(p, cat2, &emb.emb_s);
        let ru2_up = Upsample2x::forward(ru2.view());
        let u1 = self.up1.forward(p, ru2_up.view());
        let cat1 = concat_channels(&u1, &r0);
        let (ru1, ru1c) = self.rbu1.forward(p, cat1, &emb.emb_s);
        let ru1_up = Upsample2x::forward(ru1.view());
        let u0 = self.up0.forward(p, ru1_up.view());
        let cat0 = concat_channels(&u0, &x0in);
        let f = self.fuse.forward(p, cat0.view());
        let (og, gn_out_c) = self.gn_out.forward(p, f.view());
        let mut os = og.clone();
        silu(os.as_slice_mut().expect("contiguous"));
        let out = self.conv_out.forward(p, os.view());
        (
            out,
            DenoiserCache {
                emb,
                x0in,
                r0c,
                r0,
                r1c,
                r1,
                r2c,
                mc,
                m_up,
                ru2c,
                ru2_up,
                ru1c,
                ru1_up,
                cat0,
                f,
                gn_out_c,
                og,
                os,
                x_in,
            },
        )
    }

    pub fn forward(&self, p: &[f64], x: &Pixels, t: usize, cond: &[f64]) -> Pixels {
        self.forward_cached(p, x, t, cond).0
    }

    /// Backprop from d(out). Accumulates parameter gradients into `g`;
    /// returns (d input, d cond).
    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        cache: &DenoiserCache,
        dout: &Pixels,
    ) -> (Pixels, Vec<f64>) {
        let e = self.cfg.emb_dim;
        let mut demb_s = vec![0.0; e];
        let [c0, c1, c2, _c3] = self.cfg.channels;

        let mut dos = self.conv_out.backward(p, g, cache.os.view(), dout.view());
        silu_backward(
            cache.og.as_slice().expect("contiguous"),
            dos.as_slice_mut().expect("contiguous"),
        );
        let df = self.gn_out.backward(p, g, cache.f.view(), &cache.gn_out_c, dos.view());
        let dcat0 = self.fuse.backward(p, g, cache.cat0.view(), df.view());
        let du0 = dcat0.slice(s![..c0, .., ..]).to_owned();
        let mut dx0in = dcat0.slice(s![c0.., .., ..]).to_owned();
        let dru1_up = self.up0.backward(p, g, cache.ru1_up.view(), du0.view());
        let dru1 = Upsample2x::backward(dru1_up.view());
        let dcat1 = self
            .rbu1
            .backward(p, g, &cache.ru1c, dru1, &cache.emb.emb_s, &mut demb_s);
        let du1 = dcat1.slice(s![..c1, .., ..]).to_owned();
        let mut dr0 = dcat1.slice(s![c1.., .., ..]).to_owned();
        let dru2_up = self.up1.backward(p, g, cache.ru2_up.view(), du1.view());
        let dru2 = Upsample2x::backward(dru2_up.view());
        let dcat2 = self
            .rbu2
            .backward(p, g, &cache.ru2c, dru2, &cache.emb.emb_s, &mut demb_s);
        let du2 = dcat2.slice(s![..c2, .., ..]).to_owned();
        let mut dr1 = dcat2.slice(s![c2.., .., ..]).to_owned();
        let dm_up = self.up2.backward(p, g, cache.m_up.view(), du2.view());
        let dm = Upsample2x::backward(dm_up.view());
        let dr2 = self
            .rbm
            .backward(p, g, &cache.mc, dm, &cache.emb.emb_s, &mut demb_s);
        let dd2 = self
            .rb2
            .backward(p, g, &cache.r2c, dr2, &cache.emb.emb_s, &mut demb_s);
        dr1 = dr1 + self.down2.backward(p, g, cache.r1.view(), dd2.view());
        let dd1 = self
            .rb1
            .backward(p, g, &cache.r1c, dr1, &cache.emb.emb_s, &mut demb_s);
        dr0 = dr0 + self.down1.backward(p, g, cache.r0.view(), dd1.view());
        let dd0 = self
            .rb0
            .backward(p, g, &cache.r0c, dr0, &cache.emb.emb_s, &mut demb_s);
        dx0in = dx0in + self.down0.backward(p, g, cache.x0in.view(), dd0.view());
        let dx = self.stem.backward(p, g, cache.x_in.view(), dx0in.view());

        // embedding path
        silu_backward(&cache.emb.emb, &mut demb_s);
        let demb_row = ArrayView2::from_shape((1, e), &demb_s).expect("row");
        let mut dt1a = self.lin_t2.backward(p, g, cache.emb.t1a.view(), demb_row);
        silu_backward(
            cache.emb.t1.as_slice().expect("contiguous"),
            dt1a.as_slice_mut().expect("contiguous"),
        );
        let se_row = ArrayView2::from_shape((1, e), &cache.emb.se).expect("row");
        let _ = self.lin_t1.backward(p, g, se_row, dt1a.view());
        let mut dz1a = self.lin_z2.backward(p, g, cache.emb.z1a.view(), demb_row);
        silu_backward(
            cache.emb.z1.as_slice().expect("contiguous"),
            dz1a.as_slice_mut().expect("contiguous"),
        );
        let cond_row =
            ArrayView2::from_shape((1, self.cfg.cond_dim), &cache.emb.cond).expect("row");
        let dcond_row = self.lin_z1.backward(p, g, cond_row, dz1a.view());
        (dx, dcond_row.row(0).to_vec())
    }
}

/// A trained (or freshly initialized) denoiser: net structure plus flat
/// parameters.
pub struct Denoiser {
    pub net: DenoiserNet,
    pub params: Vec<f64>,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Self {
        let net = DenoiserNet::new(cfg);
        let params = net.init_params(seed);
        Denoiser { net, params }
    }

    pub fn checksum(&self) -> u64 {
        crate::rng::param_checksum(&self.params)
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, x_t: &Pixels, t: usize, cond: &[f64]) -> Pixels {
        self.net.forward(&self.params, x_t, t, cond)
    }
}
