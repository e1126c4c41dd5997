//! Classifier-aware semantic latent space.
//!
//! An encoder maps each image to a code z; the frozen classifier's
//! probability row is concatenated onto it to form the semantic code that
//! conditions the denoiser. Training minimizes the noise-prediction loss
//! plus `lambda1` times a KL term that keeps the classifier's verdict on the
//! reconstruction aligned with its verdict on the input.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::datagen::DatasetSplit;
use crate::denoiser::{Denoiser, DenoiserCache, DenoiserConfig, DenoiserNet};
use crate::diffusion::{ddim_invert, ddim_sample, ddim_time_grid, make_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imageio::{clamp01, Pixels};
use crate::nn::adam::clip_global_norm;
use crate::nn::{
    chunked_batch_grad, silu, silu_backward, softmax_row, Adam, Conv2d, GroupNorm, Layout, Linear,
};
use crate::rng::{derive_seed, fnv1a64, param_checksum, stream_from};

pub const PROB_FLOOR: f64 = 1e-8;
const SIMPLEX_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdaeConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub d_z: usize,
    pub lambda1: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// DDIM stride used for reconstruction and counterfactuals.
    pub n_steps: usize,
    pub grad_clip: f64,
    pub emb_dim: usize,
    pub denoiser_channels: [usize; 4],
    pub encoder_channels: [usize; 3],
    /// Use a full DDIM rollout for x' in the classifier term instead of the
    /// one-step estimate. Expensive; intended for small runs.
    pub full_sampling_cls: bool,
    /// Skip the classifier term entirely (ablation switch).
    pub ablate_cls: bool,
    /// Exponential moving average decay for the returned weights
    /// (0 disables). Warm-up follows min(decay, (1+n)/(10+n)).
    pub ema_decay: f64,
    /// Learning-rate multiplier applied after 70% of the epochs
    /// (1 = constant rate).
    pub lr_decay: f64,
}

impl Default for SdaeConfig {
    fn default() -> Self {
        SdaeConfig {
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            d_z: 64,
            lambda1: 0.1,
            epochs: 40,
            batch_size: 16,
            lr: 1.5e-3,
            n_steps: 40,
            grad_clip: 1.0,
            emb_dim: 64,
            denoiser_channels: [12, 24, 48, 96],
            encoder_channels: [16, 32, 64],
            full_sampling_cls: false,
            ablate_cls: false,
            ema_decay: 0.999,
            lr_decay: 0.3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SdaeReport {
    pub diffusion_losses: Vec<f64>,
    pub cls_losses: Vec<f64>,
    pub total_losses: Vec<f64>,
    pub seed: u64,
    pub config_hash: String,
}

/// Conditioning vector [z || classifier probabilities].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticCode {
    pub d_z: usize,
    pub n_classes: usize,
    data: Vec<f64>,
}

impl SemanticCode {
    pub fn z(&self) -> &[f64] {
        &self.data[..self.d_z]
    }

    pub fn probs(&self) -> &[f64] {
        &self.data[self.d_z..]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Raw copy for arithmetic in direction space.
    pub fn to_vec(&self) -> Vec<f64> {
        self.data.clone()
    }

    /// Rebuild from a shifted raw vector. No simplex check: shifted codes
    /// legitimately leave the simplex on the probability slots.
    pub fn from_raw(d_z: usize, n_classes: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), d_z + n_classes);
        SemanticCode {
            d_z,
            n_classes,
            data,
        }
    }
}

impl std::ops::Deref for SemanticCode {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.data
    }
}

/// Concatenate an encoder code with a probability row.
pub fn make_semantic_code(z: &[f64], probs: &[f64]) -> Result<SemanticCode> {
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|&p| p < -SIMPLEX_TOL) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Input(format!(
            "probability row off the simplex (sum {sum})"
        )));
    }
    let mut data = Vec::with_capacity(z.len() + probs.len());
    data.extend_from_slice(z);
    data.extend_from_slice(probs);
    Ok(SemanticCode {
        d_z: z.len(),
        n_classes: probs.len(),
        data,
    })
}

fn pick_groups(c: usize) -> usize {
    for g in [8, 4, 2, 1] {
        if c.is_multiple_of(g) {
            return g;
        }
    }
    1
}

/// Convolutional encoder: three stride-2 blocks, global pooling, linear head,
/// tanh. The tanh keeps codes in (-1,1) so direction shifts at |alpha| up to
/// a few units are meaningful displacements.
#[derive(Debug)]
pub struct EncoderNet {
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
    conv3: Conv2d,
    gn3: GroupNorm,
    head: Linear,
    pub d_z: usize,
    n_params: usize,
}

pub struct EncoderCache {
    x: Array3<f64>,
    c1: Array3<f64>,
    g1: crate::nn::norm::GnCache,
    a1: Array3<f64>,
    s1: Array3<f64>,
    c2: Array3<f64>,
    g2: crate::nn::norm::GnCache,
    a2: Array3<f64>,
    s2: Array3<f64>,
    c3: Array3<f64>,
    g3: crate::nn::norm::GnCache,
    a3: Array3<f64>,
    s3: Array3<f64>,
    pooled: Vec<f64>,
    z: Vec<f64>,
}

impl EncoderNet {
    pub fn new(channels: [usize; 3], d_z: usize) -> Self {
        let [c1, c2, c3] = channels;
        let mut l = Layout::new();
        let net = EncoderNet {
            conv1: Conv2d::new(&mut l, 3, c1, 3, 2, 1),
            gn1: GroupNorm::new(&mut l, c1, pick_groups(c1)),
            conv2: Conv2d::new(&mut l, c1, c2, 3, 2, 1),
            gn2: GroupNorm::new(&mut l, c2, pick_groups(c2)),
            conv3: Conv2d::new(&mut l, c2, c3, 3, 2, 1),
            gn3: GroupNorm::new(&mut l, c3, pick_groups(c3)),
            head: Linear::new(&mut l, c3, d_z),
            d_z,
            n_params: 0,
        };
        EncoderNet {
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
        self.conv1.init(&mut p, 2.0, &mut rng);
        self.gn1.init(&mut p);
        self.conv2.init(&mut p, 2.0, &mut rng);
        self.gn2.init(&mut p);
        self.conv3.init(&mut p, 2.0, &mut rng);
        self.gn3.init(&mut p);
        self.head.init(&mut p, 1.0, &mut rng);
        p
    }

    pub fn forward_cached(&self, p: &[f64], x: &Pixels) -> (Vec<f64>, EncoderCache) {
        let c1 = self.conv1.forward(p, x.view());
        let (a1, g1) = self.gn1.forward(p, c1.view());
        let mut s1 = a1.clone();
        silu(s1.as_slice_mut().expect("contiguous"));
        let c2 = self.conv2.forward(p, s1.view());
        let (a2, g2) = self.gn2.forward(p, c2.view());
        let mut s2 = a2.clone();
        silu(s2.as_slice_mut().expect("contiguous"));
        let c3 = self.conv3.forward(p, s2.view());
        let (a3, g3) = self.gn3.forward(p, c3.view());
        let mut s3 = a3.clone();
        silu(s3.as_slice_mut().expect("contiguous"));
        let hw = (s3.dim().1 * s3.dim().2) as f64;
        let pooled: Vec<f64> = s3.outer_iter().map(|plane| plane.sum() / hw).collect();
        let pooled_row = Array2::from_shape_vec((1, pooled.len()), pooled.clone()).expect("row");
        let pre = self.head.forward(p, pooled_row.view());
        let z: Vec<f64> = pre.row(0).iter().map(|v| v.tanh()).collect();
        (
            z.clone(),
            EncoderCache {
                x: x.clone(),
                c1,
                g1,
                a1,
                s1,
                c2,
                g2,
                a2,
                s2,
                c3,
                g3,
                a3,
                s3,
                pooled,
                z,
            },
        )
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &EncoderCache, dz: &[f64]) {
        // tanh backward using the post-activation output
        let dpre: Vec<f64> = dz
            .iter()
            .zip(&cache.z)
            .map(|(&d, &z)| d * (1.0 - z * z))
            .collect();
        let n_feat = cache.pooled.len();
        let pooled_row = Array2::from_shape_vec((1, n_feat), cache.pooled.clone()).expect("row");
        let dpre_row = Array2::from_shape_vec((1, dpre.len()), dpre).expect("row");
        let dpooled = self.head.backward(p, g, pooled_row.view(), dpre_row.view());
        let (_, h, w) = cache.s3.dim();
        let hw = (h * w) as f64;
        let mut ds3 = Array3::<f64>::zeros(cache.s3.dim());
        for (c, mut plane) in ds3.outer_iter_mut().enumerate() {
            plane.fill(dpooled[[0, c]] / hw);
        }
        silu_backward(
            cache.a3.as_slice().expect("contiguous"),
            ds3.as_slice_mut().expect("contiguous"),
        );
        let dc3 = self.gn3.backward(p, g, cache.c3.view(), &cache.g3, ds3.view());
        let mut ds2 = self.conv3.backward(p, g, cache.s2.view(), dc3.view());
        silu_backward(
            cache.a2.as_slice().expect("contiguous"),
            ds2.as_slice_mut().expect("contiguous"),
        );
        let dc2 = self.gn2.backward(p, g, cache.c2.view(), &cache.g2, ds2.view());
        let mut ds1 = self.conv2.backward(p, g, cache.s1.view(), dc2.view());
        silu_backward(
            cache.a1.as_slice().expect("contiguous"),
            ds1.as_slice_mut().expect("contiguous"),
        );
        let dc1 = self.gn1.backward(p, g, cache.c1.view(), &cache.g1, ds1.view());
        self.conv1.backward(p, g, cache.x.view(), dc1.view());
    }
}

/// A trained semantic encoder: net plus flat parameters.
pub struct SemanticEncoder {
    pub net: EncoderNet,
    pub params: Vec<f64>,
    pub d_z: usize,
}

impl SemanticEncoder {
    pub fn new(channels: [usize; 3], d_z: usize, seed: u64) -> Self {
        let net = EncoderNet::new(channels, d_z);
        let params = net.init_params(seed);
        SemanticEncoder { net, params, d_z }
    }

    pub fn checksum(&self) -> u64 {
        param_checksum(&self.params)
    }
}

/// Deterministic encoding of one image.
pub fn encode(encoder: &SemanticEncoder, x: &Pixels) -> Vec<f64> {
    encoder.net.forward_cached(&encoder.params, x).0
}

/// Semantic code for one image under frozen encoder and classifier.
pub fn semantic_code_for(
    encoder: &SemanticEncoder,
    classifier: &ClassifierModel,
    x: &Pixels,
) -> Result<SemanticCode> {
    let z = encode(encoder, x);
    let probs = classifier.probs_unchecked(x);
    make_semantic_code(&z, &probs)
}

/// KL divergence D[C(x') || C(x)] with probabilities floored at 1e-8.
pub fn classifier_kl_loss(x_prime: &Pixels, x: &Pixels, classifier: &ClassifierModel) -> f64 {
    let p_prime = classifier.probs_unchecked(x_prime);
    let p = classifier.probs_unchecked(x);
    kl_div(&p_prime, &p)
}

pub fn kl_div(p_from: &[f64], p_to: &[f64]) -> f64 {
    p_from
        .iter()
        .zip(p_to)
        .map(|(&a, &b)| {
            let a = a.max(PROB_FLOOR);
            let b = b.max(PROB_FLOOR);
            a * (a.ln() - b.ln())
        })
        .sum()
}

/// One Monte-Carlo draw for the diffusion loss: a step index and a noise
/// image.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Pixels,
}

pub fn draw_noise(rng: &mut ChaCha8Rng, t_max: usize, shape: (usize, usize, usize)) -> NoiseDraw {
    let t = rng.gen_range(1..=t_max);
    let mut eps = Array3::zeros(shape);
    crate::nn::fill_standard_normal(eps.as_slice_mut().expect("contiguous"), rng);
    NoiseDraw { t, eps }
}

/// Mean over the batch of per-pixel squared noise-prediction error at
/// uniformly sampled steps, conditioning on the semantic code of the clean
/// image.
pub fn diffusion_loss(
    batch: &[Pixels],
    encoder: &SemanticEncoder,
    denoiser: &dyn crate::diffusion::NoisePredictor,
    classifier: &ClassifierModel,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("diffusion loss needs a non-empty batch".into()));
    }
    let mut total = 0.0;
    for x in batch {
        let draw = draw_noise(rng, schedule.t_max, x.dim());
        let code = semantic_code_for(encoder, classifier, x)?;
        let x_t = crate::diffusion::q_sample(x, draw.t, &draw.eps, schedule)?;
        let eps_hat = denoiser.predict_noise(&x_t, draw.t, &code);
        let n = x.len() as f64;
        let se: f64 = eps_hat
            .iter()
            .zip(draw.eps.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += se / n;
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Training(format!("diffusion loss non-finite: {loss}")));
    }
    Ok(loss)
}

/// Bundles the encoder and denoiser nets over one concatenated parameter
/// vector: [encoder params || denoiser params]. Exposes loss and gradient
/// entry points so tests can finite-difference the exact training objective.
pub struct SdaeTrainer {
    pub enc_net: EncoderNet,
    pub den_net: DenoiserNet,
    pub n_enc: usize,
    pub n_total: usize,
    pub lambda1: f64,
    pub full_sampling_cls: bool,
    pub ablate_cls: bool,
    pub n_steps: usize,
}

/// Per-sample losses accumulated across a batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct SdaeLosses {
    pub diffusion: f64,
    pub cls: f64,
}

impl SdaeLosses {
    pub fn total(&self, lambda1: f64) -> f64 {
        self.diffusion + lambda1 * self.cls
    }
}

impl SdaeTrainer {
    pub fn new(cfg: &SdaeConfig) -> Self {
        let enc_net = EncoderNet::new(cfg.encoder_channels, cfg.d_z);
        let den_net = DenoiserNet::new(DenoiserConfig {
            channels: cfg.denoiser_channels,
            emb_dim: cfg.emb_dim,
            cond_dim: cfg.d_z + crate::classifier::N_CLASSES,
            in_channels: 3,
        });
        let n_enc = enc_net.n_params();
        let n_total = n_enc + den_net.n_params();
        SdaeTrainer {
            enc_net,
            den_net,
            n_enc,
            n_total,
            lambda1: cfg.lambda1,
            full_sampling_cls: cfg.full_sampling_cls,
            ablate_cls: cfg.ablate_cls,
            n_steps: cfg.n_steps,
        }
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut p = self.enc_net.init_params(derive_seed(seed, "sdae/enc"));
        p.extend(self.den_net.init_params(derive_seed(seed, "sdae/den")));
        p
    }

    fn split<'a>(&self, params: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        params.split_at(self.n_enc)
    }

    /// Forward losses for one sample with a fixed draw. `grad` accumulates
    /// into [enc || den] when provided.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_loss_grad(
        &self,
        params: &[f64],
        classifier: &ClassifierModel,
        schedule: &NoiseSchedule,
        x: &Pixels,
        draw: &NoiseDraw,
        batch_scale: f64,
        grad: Option<&mut [f64]>,
    ) -> SdaeLosses {
        let (p_enc, p_den) = self.split(params);
        let (z, enc_cache) = self.enc_net.forward_cached(p_enc, x);
        // the classifier score is detached conditioning: the frozen model is
        // the object under explanation
        let probs = classifier.probs_unchecked(x);
        let mut code = z.clone();
        code.extend_from_slice(&probs);
        let ab_t = schedule.alpha_bar(draw.t);
        let x_t = x * ab_t.sqrt() + &draw.eps * (1.0 - ab_t).sqrt();
        let (eps_hat, den_cache) = self.den_net.forward_cached(p_den, &x_t, draw.t, &code);
        let n = x.len() as f64;
        let diff_loss: f64 = eps_hat
            .iter()
            .zip(draw.eps.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;

        let use_cls = !self.ablate_cls && self.lambda1 != 0.0;
        let mut cls_loss = 0.0;
        let mut deps_cls: Option<Pixels> = None;
        let mut full_chain: Option<FullChain> = None;
        if use_cls {
            if self.full_sampling_cls {
                let (loss, chain) =
                    self.cls_full_forward(p_den, classifier, schedule, &x_t, draw.t, &code, &probs);
                cls_loss = loss;
                full_chain = Some(chain);
            } else {
                let (loss, dx0) = cls_onestep(classifier, schedule, &x_t, draw.t, &eps_hat, &probs);
                cls_loss = loss;
                deps_cls = Some(dx0);
            }
        }

        if let Some(g) = grad {
            let (g_enc, g_den) = g.split_at_mut(self.n_enc);
            // d(total)/d(eps_hat): diffusion term plus the one-step cls path
            let mut deps = eps_hat.clone();
            for (d, (a, b)) in deps
                .iter_mut()
                .zip(eps_hat.iter().zip(draw.eps.iter()))
            {
                *d = 2.0 * (a - b) / n * batch_scale;
            }
            if let Some(dx0) = &deps_cls {
                // x0_hat = (x_t - sqrt(1-abar) eps_hat)/sqrt(abar)
                let coef = -((1.0 - ab_t).sqrt()) / ab_t.sqrt();
                let s = self.lambda1 * batch_scale * coef;
                for (d, &v) in deps.iter_mut().zip(dx0.iter()) {
                    *d += s * v;
                }
            }
            let (_dxt, mut dcond) = self.den_net.backward(p_den, g_den, &den_cache, &deps);
            if let Some(chain) = &full_chain {
                let dcond_extra = self.cls_full_backward(
                    p_den,
                    g_den,
                    classifier,
                    chain,
                    self.lambda1 * batch_scale,
                );
                for (a, b) in dcond.iter_mut().zip(&dcond_extra) {
                    *a += b;
                }
            }
            self.enc_net
                .backward(p_enc, g_enc, &enc_cache, &dcond[..self.enc_net.d_z]);
        }
        SdaeLosses {
            diffusion: diff_loss,
            cls: cls_loss,
        }
    }

    /// Full DDIM rollout from (x_t, t) down to 0 for the classifier term.
    #[allow(clippy::too_many_arguments)]
    fn cls_full_forward(
        &self,
        p_den: &[f64],
        classifier: &ClassifierModel,
        schedule: &NoiseSchedule,
        x_t: &Pixels,
        t: usize,
        code: &[f64],
        target_probs: &[f64],
    ) -> (f64, FullChain) {
        let mut grid: Vec<usize> = ddim_time_grid(schedule.t_max, self.n_steps)
            .expect("valid stride")
            .into_iter()
            .filter(|&s| s < t)
            .collect();
        grid.insert(0, t);
        let mut x = x_t.clone();
        let mut steps = Vec::new();
        for w in grid.windows(2) {
            let (tc, tn) = (w[0], w[1]);
            let (eps, cache) = self.den_net.forward_cached(p_den, &x, tc, code);
            let ab_t = schedule.alpha_bar(tc);
            let ab_n = schedule.alpha_bar(tn);
            let x0_hat = (&x - &(&eps * (1.0 - ab_t).sqrt())) / ab_t.sqrt();
            let x_next = &x0_hat * ab_n.sqrt() + &eps * (1.0 - ab_n).sqrt();
            steps.push(FullStep { cache, ab_t, ab_n });
            x = x_next;
        }
        let (logits, clf_cache) = classifier.logits_cached(&x);
        let q = softmax_row(&logits);
        let loss = kl_div(&q, target_probs);
        (
            loss,
            FullChain {
                steps,
                clf_cache,
                q,
                target: target_probs.to_vec(),
            },
        )
    }

    /// Backprop the classifier term through the rollout. Accumulates denoiser
    /// grads and returns d(code).
    fn cls_full_backward(
        &self,
        p_den: &[f64],
        g_den: &mut [f64],
        classifier: &ClassifierModel,
        chain: &FullChain,
        scale: f64,
    ) -> Vec<f64> {
        let kl = kl_div(&chain.q, &chain.target);
        let dlogits: Vec<f64> = chain
            .q
            .iter()
            .zip(&chain.target)
            .map(|(&qi, &pi)| {
                scale * qi * ((qi.max(PROB_FLOOR).ln() - pi.max(PROB_FLOOR).ln()) - kl)
            })
            .collect();
        let mut dx = classifier.input_grad(&chain.clf_cache, &dlogits);
        let mut dcond = vec![0.0; self.den_net.cfg.cond_dim];
        for step in chain.steps.iter().rev() {
            // x_next = sqrt(ab_n/ab_t) x + (sqrt(1-ab_n) - sqrt(ab_n(1-ab_t)/ab_t)) eps
            let a = (step.ab_n / step.ab_t).sqrt();
            let b = (1.0 - step.ab_n).sqrt() - (step.ab_n * (1.0 - step.ab_t) / step.ab_t).sqrt();
            let deps = &dx * b;
            let (dxt, dc) = self.den_net.backward(p_den, g_den, &step.cache, &deps);
            dx = dx * a + dxt;
            for (acc, v) in dcond.iter_mut().zip(dc) {
                *acc += v;
            }
        }
        dcond
    }
}

struct FullStep {
    cache: DenoiserCache,
    ab_t: f64,
    ab_n: f64,
}

struct FullChain {
    steps: Vec<FullStep>,
    clf_cache: crate::classifier::ClassifierCache,
    q: Vec<f64>,
    target: Vec<f64>,
}

/// One-step classifier term: loss and d(loss)/d(x0_hat).
fn cls_onestep(
    classifier: &ClassifierModel,
    schedule: &NoiseSchedule,
    x_t: &Pixels,
    t: usize,
    eps_hat: &Pixels,
    target_probs: &[f64],
) -> (f64, Pixels) {
    let ab = schedule.alpha_bar(t);
    let x0_hat = (x_t - &(eps_hat * (1.0 - ab).sqrt())) / ab.sqrt();
    let (logits, cache) = classifier.logits_cached(&x0_hat);
    let q = softmax_row(&logits);
    let loss = kl_div(&q, target_probs);
    let dlogits: Vec<f64> = q
        .iter()
        .zip(target_probs)
        .map(|(&qi, &pi)| qi * ((qi.max(PROB_FLOOR).ln() - pi.max(PROB_FLOOR).ln()) - loss))
        .collect();
    let dx0 = classifier.input_grad(&cache, &dlogits);
    (loss, dx0)
}

/// Train the semantic autoencoder against a frozen classifier. Deterministic
/// given (split, classifier, config, seed).
pub fn train_semantic_ae(
    split: &DatasetSplit,
    classifier: &ClassifierModel,
    cfg: &SdaeConfig,
    seed: u64,
) -> Result<(SemanticEncoder, Denoiser, SdaeReport)> {
    if split.train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let clf_checksum = classifier.checksum();
    let schedule = make_schedule(cfg.t_max, cfg.beta_start, cfg.beta_end)?;
    let trainer = SdaeTrainer::new(cfg);
    let mut params = trainer.init_params(derive_seed(seed, "sdae/init"));
    let mut ema = (cfg.ema_decay > 0.0).then(|| params.clone());
    let mut ema_steps = 0u64;
    let mut opt = Adam::new(params.len(), cfg.lr);
    let mut shuffle_rng = stream_from(derive_seed(seed, "sdae/shuffle"));
    let mut noise_rng = stream_from(derive_seed(seed, "sdae/noise"));
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let shape = split.train[0].pixels.dim();

    let mut report = SdaeReport {
        diffusion_losses: Vec::new(),
        cls_losses: Vec::new(),
        total_losses: Vec::new(),
        seed,
        config_hash: format!(
            "{:016x}",
            fnv1a64(serde_json::to_string(cfg).expect("config serializes").as_bytes())
        ),
    };

    let decay_epoch = (cfg.epochs * 7).div_ceil(10);
    for epoch in 0..cfg.epochs {
        if epoch == decay_epoch && cfg.lr_decay != 1.0 {
            opt.lr *= cfg.lr_decay;
        }
        for i in (1..order.len()).rev() {
            let j = (shuffle_rng.gen::<f64>() * (i + 1) as f64).floor() as usize;
            order.swap(i, j.min(i));
        }
        let (mut ep_diff, mut ep_cls, mut n_seen) = (0.0, 0.0, 0usize);
        for batch_idx in order.chunks(cfg.batch_size) {
            // draws happen sequentially so the stream is thread-independent
            let items: Vec<(&Pixels, NoiseDraw)> = batch_idx
                .iter()
                .map(|&i| {
                    (
                        &split.train[i].pixels,
                        draw_noise(&mut noise_rng, cfg.t_max, shape),
                    )
                })
                .collect();
            let scale = 1.0 / items.len() as f64;
            let losses_cell = std::sync::Mutex::new(SdaeLosses::default());
            let (mut grads, _) = chunked_batch_grad(&items, 8, params.len(), |_, (x, draw), g| {
                let l = trainer.sample_loss_grad(
                    &params,
                    classifier,
                    &schedule,
                    x,
                    draw,
                    scale,
                    Some(g),
                );
                let mut acc = losses_cell.lock().expect("loss mutex");
                acc.diffusion += l.diffusion;
                acc.cls += l.cls;
                l.total(trainer.lambda1)
            });
            let batch_losses = losses_cell.into_inner().expect("loss mutex");
            let mean_total = batch_losses.total(trainer.lambda1) * scale;
            if !mean_total.is_finite() {
                return Err(Error::Training(format!(
                    "semantic-ae loss became non-finite at epoch {epoch} after {n_seen} samples; \
                     last completed epoch {} is the last good state",
                    epoch.saturating_sub(1)
                )));
            }
            if cfg.grad_clip > 0.0 {
                clip_global_norm(&mut grads, cfg.grad_clip);
            }
            opt.step(&mut params, &grads);
            if let Some(ema) = ema.as_mut() {
                ema_steps += 1;
                let d = cfg
                    .ema_decay
                    .min((1 + ema_steps) as f64 / (10 + ema_steps) as f64);
                for (e, &p) in ema.iter_mut().zip(params.iter()) {
                    *e = d * *e + (1.0 - d) * p;
                }
            }
            ep_diff += batch_losses.diffusion;
            ep_cls += batch_losses.cls;
            n_seen += items.len();
        }
        report.diffusion_losses.push(ep_diff / n_seen as f64);
        report.cls_losses.push(ep_cls / n_seen as f64);
        report
            .total_losses
            .push((ep_diff + trainer.lambda1 * ep_cls) / n_seen as f64);
    }

    if classifier.checksum() != clf_checksum {
        return Err(Error::Training(
            "classifier parameters changed during semantic-ae training".into(),
        ));
    }
    let final_params = ema.unwrap_or(params);
    let (p_enc, p_den) = trainer.split(&final_params);
    let encoder = SemanticEncoder {
        params: p_enc.to_vec(),
        d_z: trainer.enc_net.d_z,
        net: trainer.enc_net,
    };
    let denoiser = Denoiser {
        params: p_den.to_vec(),
        net: trainer.den_net,
    };
    Ok((encoder, denoiser, report))
}

/// Deterministic reconstruction: invert to x_T under the image's own
/// semantic code, then sample back down and clamp to [0,1].
pub fn reconstruct(
    x: &Pixels,
    encoder: &SemanticEncoder,
    denoiser: &dyn crate::diffusion::NoisePredictor,
    classifier: &ClassifierModel,
    schedule: &NoiseSchedule,
    n_steps: usize,
) -> Result<Pixels> {
    let code = semantic_code_for(encoder, classifier, x)?;
    let x_t = ddim_invert(x, &code, denoiser, schedule, n_steps)?;
    let mut x_prime = ddim_sample(&x_t, &code, denoiser, schedule, n_steps)?;
    clamp01(&mut x_prime);
    Ok(x_prime)
}
