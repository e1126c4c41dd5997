//! Contrastive discovery of disentangled directions in semantic-code space.
//!
//! A bank of K small MLPs each maps a code to an unnormalized direction;
//! shifts are applied with unit-normalized directions scaled by alpha. A
//! shared feature MLP turns shifted-minus-original codes into feature
//! divergences: divergences from the same direction attract, divergences
//! from different directions repel, and a cross-covariance penalty pushes
//! the directions' outputs to decorrelate.

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::imageio::Pixels;
use crate::nn::{silu, silu_backward, Adam, Layout, Linear};
use crate::rng::{derive_seed, fnv1a64, param_checksum, stream_from};
use crate::semantic_ae::{semantic_code_for, SemanticCode, SemanticEncoder};

pub const NORM_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionsConfig {
    /// Number of direction models.
    pub k: usize,
    /// Feature dimension of the shared MLP.
    pub d_f: usize,
    pub mlp1_hidden: usize,
    pub mlp2_hidden: usize,
    /// Contrastive temperature.
    pub tau: f64,
    /// Weight of the covariance regularizer.
    pub lambda2: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Skip the covariance term entirely (ablation switch).
    pub ablate_reg: bool,
}

impl Default for DirectionsConfig {
    fn default() -> Self {
        DirectionsConfig {
            k: 10,
            d_f: 128,
            mlp1_hidden: 128,
            mlp2_hidden: 256,
            tau: 0.5,
            lambda2: 1.0,
            alpha_min: 0.5,
            alpha_max: 3.0,
            epochs: 40,
            batch_size: 32,
            lr: 1e-3,
            ablate_reg: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectionReport {
    pub contrastive_losses: Vec<f64>,
    pub reg_losses: Vec<f64>,
    pub total_losses: Vec<f64>,
    pub mean_pairwise_abs_cosine: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// Two-layer perceptron with SiLU in between.
#[derive(Debug, Clone)]
struct Mlp {
    lin1: Linear,
    lin2: Linear,
}

struct MlpCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl Mlp {
    fn new(l: &mut Layout, din: usize, hidden: usize, dout: usize) -> Self {
        Mlp {
            lin1: Linear::new(l, din, hidden),
            lin2: Linear::new(l, hidden, dout),
        }
    }

    fn init(&self, p: &mut [f64], rng: &mut ChaCha8Rng) {
        self.lin1.init(p, 2.0, rng);
        self.lin2.init(p, 1.0, rng);
    }

    fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let pre = self.lin1.forward(p, x);
        let mut act = pre.clone();
        silu(act.as_slice_mut().expect("contiguous"));
        let out = self.lin2.forward(p, act.view());
        (
            out,
            MlpCache {
                x: x.to_owned(),
                pre,
                act,
            },
        )
    }

    fn backward(&self, p: &[f64], g: &mut [f64], cache: &MlpCache, dout: ArrayView2<f64>) -> Array2<f64> {
        let mut dact = self.lin2.backward(p, g, cache.act.view(), dout);
        silu_backward(
            cache.pre.as_slice().expect("contiguous"),
            dact.as_slice_mut().expect("contiguous"),
        );
        self.lin1.backward(p, g, cache.x.view(), dact.view())
    }
}

/// K direction MLPs plus the shared feature MLP over one flat parameter
/// vector, with the contrastive hyperparameters they were trained with.
pub struct DirectionBank {
    pub code_dim: usize,
    pub cfg: DirectionsConfig,
    mlp1: Vec<Mlp>,
    mlp2: Mlp,
    pub params: Vec<f64>,
    n_params: usize,
}

impl DirectionBank {
    pub fn new(code_dim: usize, cfg: DirectionsConfig, seed: u64) -> Result<Self> {
        if cfg.k < 2 {
            return Err(Error::Input(format!(
                "need at least 2 direction models, got {}",
                cfg.k
            )));
        }
        if cfg.tau <= 0.0 {
            return Err(Error::Input("temperature must be positive".into()));
        }
        if cfg.lambda2 < 0.0 {
            return Err(Error::Input("lambda2 must be non-negative".into()));
        }
        if !(cfg.alpha_min > 0.0 && cfg.alpha_min <= cfg.alpha_max) {
            return Err(Error::Input(
                "alpha range must satisfy 0 < alpha_min <= alpha_max".into(),
            ));
        }
        let mut l = Layout::new();
        let mlp1: Vec<Mlp> = (0..cfg.k)
            .map(|_| Mlp::new(&mut l, code_dim, cfg.mlp1_hidden, code_dim))
            .collect();
        let mlp2 = Mlp::new(&mut l, code_dim, cfg.mlp2_hidden, cfg.d_f);
        let mut params = vec![0.0; l.len()];
        for (i, m) in mlp1.iter().enumerate() {
            let mut rng = stream_from(derive_seed(seed, &format!("directions/mlp1/{i}")));
            m.init(&mut params, &mut rng);
        }
        let mut rng = stream_from(derive_seed(seed, "directions/mlp2"));
        mlp2.init(&mut params, &mut rng);
        Ok(DirectionBank {
            code_dim,
            n_params: l.len(),
            cfg,
            mlp1,
            mlp2,
            params,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn k(&self) -> usize {
        self.cfg.k
    }

    pub fn checksum(&self) -> u64 {
        param_checksum(&self.params)
    }

    /// Unit direction of model k at a batch of codes: [B, code_dim].
    /// Returns (raw outputs, unit rows, row norms, forward cache).
    #[allow(clippy::type_complexity)]
    fn unit_directions(&self, p: &[f64], k: usize, z: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>, Vec<f64>, MlpCache)> {
        let (u, cache) = self.mlp1[k].forward(p, z);
        let mut norms = Vec::with_capacity(u.nrows());
        for row in u.rows() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n <= NORM_GUARD {
                return Err(Error::Numeric(format!(
                    "direction model {k} produced a near-zero vector (norm {n:.3e})"
                )));
            }
            norms.push(n);
        }
        let mut unit = u.clone();
        for (mut row, &n) in unit.rows_mut().into_iter().zip(&norms) {
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        Ok((u, unit, norms, cache))
    }
}

/// Shift a semantic code along direction k with magnitude alpha. The
/// displacement norm is exactly |alpha| (up to rounding) because the
/// direction is unit-normalized at application time.
pub fn apply_direction(
    bank: &DirectionBank,
    k: usize,
    code: &SemanticCode,
    alpha: f64,
) -> Result<SemanticCode> {
    if k >= bank.cfg.k {
        return Err(Error::Input(format!(
            "direction index {k} out of range 0..{}",
            bank.cfg.k
        )));
    }
    if code.len() != bank.code_dim {
        return Err(Error::Input(format!(
            "code dimension {} does not match bank dimension {}",
            code.len(),
            bank.code_dim
        )));
    }
    let z = ArrayView2::from_shape((1, code.len()), code).expect("row");
    let (_, unit, _, _) = bank.unit_directions(&bank.params, k, z)?;
    let data: Vec<f64> = code
        .iter()
        .zip(unit.row(0).iter())
        .map(|(&c, &u)| c + alpha * u)
        .collect();
    Ok(SemanticCode::from_raw(code.d_z, code.n_classes, data))
}

/// Feature divergences f[i][k] = MLP2(shifted code) - MLP2(original code).
#[derive(Debug, Clone)]
pub struct FeatureDivergence {
    /// [batch, direction, feature]
    pub f: Array3<f64>,
}

/// Compute feature divergences for a batch of codes with per-(sample,
/// direction) shift magnitudes.
pub fn feature_divergence(
    bank: &DirectionBank,
    codes: &[SemanticCode],
    alphas: &Array2<f64>,
) -> Result<FeatureDivergence> {
    let b = codes.len();
    if b < 2 {
        return Err(Error::Input("need a batch of at least 2 codes".into()));
    }
    if alphas.dim() != (b, bank.cfg.k) {
        return Err(Error::Input(format!(
            "alphas shape {:?} does not match (batch, k) = ({b}, {})",
            alphas.dim(),
            bank.cfg.k
        )));
    }
    let z = codes_matrix(codes, bank.code_dim)?;
    let p = &bank.params;
    let (h0, _) = bank.mlp2.forward(p, z.view());
    let mut f = Array3::zeros((b, bank.cfg.k, bank.cfg.d_f));
    for k in 0..bank.cfg.k {
        let (_, unit, _, _) = bank.unit_directions(p, k, z.view())?;
        let mut zs = z.clone();
        for (bi, mut row) in zs.rows_mut().into_iter().enumerate() {
            let a = alphas[[bi, k]];
            for (v, &u) in row.iter_mut().zip(unit.row(bi).iter()) {
                *v += a * u;
            }
        }
        let (hs, _) = bank.mlp2.forward(p, zs.view());
        for bi in 0..b {
            for d in 0..bank.cfg.d_f {
                f[[bi, k, d]] = hs[[bi, d]] - h0[[bi, d]];
            }
        }
    }
    Ok(FeatureDivergence { f })
}

fn codes_matrix(codes: &[SemanticCode], dim: usize) -> Result<Array2<f64>> {
    let mut z = Array2::zeros((codes.len(), dim));
    for (i, c) in codes.iter().enumerate() {
        if c.len() != dim {
            return Err(Error::Input(format!(
                "code {i} has dimension {}, expected {dim}",
                c.len()
            )));
        }
        for (j, &v) in c.iter().enumerate() {
            z[[i, j]] = v;
        }
    }
    Ok(z)
}

/// Contrastive loss over feature divergences: for each anchor (i, k), same-
/// direction divergences from other samples form the numerator, divergences
/// from every other direction form the denominator. Rows that are exactly
/// zero are skipped.
pub fn contrastive_loss(div: &FeatureDivergence, tau: f64) -> Result<f64> {
    Ok(contrastive_loss_grad(div, tau, false)?.0)
}

/// Loss plus (optionally) the gradient with respect to the divergences.
pub fn contrastive_loss_grad(
    div: &FeatureDivergence,
    tau: f64,
    want_grad: bool,
) -> Result<(f64, Option<Array3<f64>>)> {
    if tau <= 0.0 {
        return Err(Error::Input(format!("temperature must be positive, got {tau}")));
    }
    let (b, k_dirs, d_f) = div.f.dim();
    let m = b * k_dirs;
    // flatten anchors in (sample, direction) order over the contiguous buffer
    let raw = div.f.as_slice().expect("contiguous divergence tensor");
    let flat: Vec<&[f64]> = (0..m).map(|a| &raw[a * d_f..(a + 1) * d_f]).collect();
    let norms: Vec<f64> = flat
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let active: Vec<bool> = norms.iter().map(|&n| n != 0.0).collect();

    // normalized rows and the full similarity matrix
    let mut vhat = Array2::<f64>::zeros((m, d_f));
    for a in 0..m {
        if active[a] {
            for (j, &v) in flat[a].iter().enumerate() {
                vhat[[a, j]] = v / norms[a];
            }
        }
    }
    let sim = vhat.dot(&vhat.t());
    let exp_s = sim.mapv(|s| (s / tau).exp());

    let mut total = 0.0;
    let mut n_anchors = 0usize;
    // weights on sim entries, anchor-major, for the backward pass
    let mut w = if want_grad {
        Some(Array2::<f64>::zeros((m, m)))
    } else {
        None
    };
    let mut anchor_terms: Vec<(usize, f64, f64)> = Vec::new();
    for i in 0..b {
        for k in 0..k_dirs {
            let a = i * k_dirs + k;
            if !active[a] {
                continue;
            }
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..b {
                let same = j * k_dirs + k;
                if j != i && active[same] {
                    num += exp_s[[a, same]];
                }
                for l in 0..k_dirs {
                    if l == k {
                        continue;
                    }
                    let other = j * k_dirs + l;
                    if active[other] {
                        den += exp_s[[a, other]];
                    }
                }
            }
            if num <= 0.0 || den <= 0.0 {
                continue;
            }
            total += den.ln() - num.ln();
            n_anchors += 1;
            anchor_terms.push((a, num, den));
        }
    }
    if n_anchors == 0 {
        return Err(Error::Input(
            "contrastive loss undefined: no usable anchors (all divergences zero?)".into(),
        ));
    }
    let loss = total / n_anchors as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("contrastive loss non-finite: {loss}")));
    }

    let grad = if let Some(w_mat) = w.as_mut() {
        let scale = 1.0 / (n_anchors as f64 * tau);
        for &(a, num, den) in &anchor_terms {
            let (i, k) = (a / k_dirs, a % k_dirs);
            for j in 0..b {
                let same = j * k_dirs + k;
                if j != i && active[same] {
                    w_mat[[a, same]] -= exp_s[[a, same]] / num * scale;
                }
                for l in 0..k_dirs {
                    if l == k {
                        continue;
                    }
                    let other = j * k_dirs + l;
                    if active[other] {
                        w_mat[[a, other]] += exp_s[[a, other]] / den * scale;
                    }
                }
            }
        }
        // dL/dvhat = (W + W^T) vhat, then unit-normalization backward
        let wsym = w_mat.clone() + w_mat.t();
        let dvhat = wsym.dot(&vhat);
        let mut df = Array3::<f64>::zeros((b, k_dirs, d_f));
        for a in 0..m {
            if !active[a] {
                continue;
            }
            let va = vhat.row(a);
            let da = dvhat.row(a);
            let dot: f64 = va.iter().zip(da.iter()).map(|(x, y)| x * y).sum();
            let (i, k) = (a / k_dirs, a % k_dirs);
            for j in 0..d_f {
                df[[i, k, j]] = (da[j] - dot * va[j]) / norms[a];
            }
        }
        Some(df)
    } else {
        None
    };
    Ok((loss, grad))
}

/// Sum over ordered pairs of distinct direction models of the squared
/// Frobenius norm of the batch cross-covariance between their unit outputs.
pub fn covariance_reg(bank: &DirectionBank, codes: &[SemanticCode]) -> Result<f64> {
    if codes.len() < 2 {
        return Err(Error::Input("covariance regularizer needs a batch of >= 2".into()));
    }
    let z = codes_matrix(codes, bank.code_dim)?;
    let units = (0..bank.cfg.k)
        .map(|k| Ok(bank.unit_directions(&bank.params, k, z.view())?.1))
        .collect::<Result<Vec<_>>>()?;
    Ok(covariance_reg_from_units(&units).0)
}

/// (loss, d loss / d unit-directions).
fn covariance_reg_from_units(units: &[Array2<f64>]) -> (f64, Vec<Array2<f64>>) {
    let k_dirs = units.len();
    let b = units[0].nrows();
    let centered: Vec<Array2<f64>> = units
        .iter()
        .map(|u| {
            let mean = u.mean_axis(ndarray::Axis(0)).expect("non-empty batch");
            u - &mean
        })
        .collect();
    let mut loss = 0.0;
    let mut dcentered: Vec<Array2<f64>> = centered
        .iter()
        .map(|c| Array2::zeros(c.dim()))
        .collect();
    for ki in 0..k_dirs {
        for kj in 0..k_dirs {
            if ki == kj {
                continue;
            }
            let c = centered[ki].t().dot(&centered[kj]) / b as f64;
            loss += c.iter().map(|v| v * v).sum::<f64>();
            // d||C||^2 / dU_i = (2/B) U_j C^T
            let d = centered[kj].dot(&c.t()).mapv(|v| 2.0 * v / b as f64);
            dcentered[ki] = &dcentered[ki] + &d;
            let d2 = centered[ki].dot(&c).mapv(|v| 2.0 * v / b as f64);
            dcentered[kj] = &dcentered[kj] + &d2;
        }
    }
    // centering backward: subtract the column mean of the gradient
    let dunits = dcentered
        .into_iter()
        .map(|d| {
            let mean = d.mean_axis(ndarray::Axis(0)).expect("non-empty batch");
            d - &mean
        })
        .collect();
    (loss, dunits)
}

/// Mean absolute cosine between unit directions of distinct models, averaged
/// over codes. The decorrelation witness.
pub fn mean_pairwise_abs_cosine(bank: &DirectionBank, codes: &[SemanticCode]) -> Result<f64> {
    if codes.is_empty() {
        return Err(Error::Input("need at least one code".into()));
    }
    let z = codes_matrix(codes, bank.code_dim)?;
    let units = (0..bank.cfg.k)
        .map(|k| Ok(bank.unit_directions(&bank.params, k, z.view())?.1))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for ki in 0..bank.cfg.k {
        for kj in ki + 1..bank.cfg.k {
            for b in 0..codes.len() {
                let cos: f64 = units[ki]
                    .row(b)
                    .iter()
                    .zip(units[kj].row(b).iter())
                    .map(|(a, c)| a * c)
                    .sum();
                total += cos.abs();
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Full training objective and gradient for one batch of codes.
/// Returns (contrastive, regularizer) losses.
fn direction_batch_grad(
    bank: &DirectionBank,
    params: &[f64],
    z: &Array2<f64>,
    alphas: &Array2<f64>,
    grads: Option<&mut [f64]>,
) -> Result<(f64, f64)> {
    let (b, k_dirs) = (z.nrows(), bank.cfg.k);
    let p = params;
    let want_grad = grads.is_some();

    // forward: original features
    let (h0, h0_cache) = bank.mlp2.forward(p, z.view());
    let mut units = Vec::with_capacity(k_dirs);
    let mut norms_all = Vec::with_capacity(k_dirs);
    let mut mlp1_caches = Vec::with_capacity(k_dirs);
    let mut shift_caches = Vec::with_capacity(k_dirs);
    let mut f = Array3::<f64>::zeros((b, k_dirs, bank.cfg.d_f));
    for k in 0..k_dirs {
        let (_, unit, norms, cache) = bank.unit_directions(p, k, z.view())?;
        let mut zs = z.clone();
        for (bi, mut row) in zs.rows_mut().into_iter().enumerate() {
            let a = alphas[[bi, k]];
            for (v, &u) in row.iter_mut().zip(unit.row(bi).iter()) {
                *v += a * u;
            }
        }
        let (hs, hs_cache) = bank.mlp2.forward(p, zs.view());
        for bi in 0..b {
            for d in 0..bank.cfg.d_f {
                f[[bi, k, d]] = hs[[bi, d]] - h0[[bi, d]];
            }
        }
        units.push(unit);
        norms_all.push(norms);
        mlp1_caches.push(cache);
        shift_caches.push(hs_cache);
    }

    let div = FeatureDivergence { f };
    let (l_cont, df) = contrastive_loss_grad(&div, bank.cfg.tau, want_grad)?;
    let (l_reg, dunits_reg) = if bank.cfg.ablate_reg || bank.cfg.lambda2 == 0.0 {
        (0.0, None)
    } else {
        let (l, d) = covariance_reg_from_units(&units);
        (l, Some(d))
    };

    if let Some(g) = grads {
        let df = df.expect("gradient requested");
        let mut dh0 = Array2::<f64>::zeros(h0.dim());
        for k in 0..k_dirs {
            // dHs_k = df[:,k,:]; dh0 -= df[:,k,:]
            let mut dhs = Array2::<f64>::zeros((b, bank.cfg.d_f));
            for bi in 0..b {
                for d in 0..bank.cfg.d_f {
                    let v = df[[bi, k, d]];
                    dhs[[bi, d]] = v;
                    dh0[[bi, d]] -= v;
                }
            }
            let dzs = bank.mlp2.backward(p, g, &shift_caches[k], dhs.view());
            // through the shift: dU_hat = alpha * dzs (+ lambda2 * reg term)
            let mut dunit = Array2::<f64>::zeros((b, bank.code_dim));
            for bi in 0..b {
                let a = alphas[[bi, k]];
                for j in 0..bank.code_dim {
                    dunit[[bi, j]] = a * dzs[[bi, j]];
                }
            }
            if let Some(dreg) = &dunits_reg {
                for bi in 0..b {
                    for j in 0..bank.code_dim {
                        dunit[[bi, j]] += bank.cfg.lambda2 * dreg[k][[bi, j]];
                    }
                }
            }
            // unit-normalization backward
            let mut du = Array2::<f64>::zeros((b, bank.code_dim));
            for bi in 0..b {
                let uh = units[k].row(bi);
                let dv = dunit.row(bi);
                let dot: f64 = uh.iter().zip(dv.iter()).map(|(x, y)| x * y).sum();
                let n = norms_all[k][bi];
                for j in 0..bank.code_dim {
                    du[[bi, j]] = (dv[j] - dot * uh[j]) / n;
                }
            }
            bank.mlp1[k].backward(p, g, &mlp1_caches[k], du.view());
        }
        bank.mlp2.backward(p, g, &h0_cache, dh0.view());
    }
    Ok((l_cont, l_reg))
}

/// Contrastive and covariance losses for a batch of codes with explicit
/// shift magnitudes, optionally with the gradient with respect to the bank
/// parameters. The exact training objective, exposed for gradient checks
/// and diagnostics.
pub fn direction_loss_grad(
    bank: &DirectionBank,
    codes: &[SemanticCode],
    alphas: &Array2<f64>,
    want_grad: bool,
) -> Result<(f64, f64, Option<Vec<f64>>)> {
    let z = codes_matrix(codes, bank.code_dim)?;
    if want_grad {
        let mut grads = vec![0.0; bank.n_params];
        let (lc, lr) = direction_batch_grad(bank, &bank.params, &z, alphas, Some(&mut grads))?;
        Ok((lc, lr, Some(grads)))
    } else {
        let (lc, lr) = direction_batch_grad(bank, &bank.params, &z, alphas, None)?;
        Ok((lc, lr, None))
    }
}

/// Evaluate the direction objective at externally supplied parameters
/// (finite-difference probes perturb a copy of the parameter vector).
pub fn direction_loss_at(
    bank: &DirectionBank,
    params: &[f64],
    codes: &[SemanticCode],
    alphas: &Array2<f64>,
) -> Result<(f64, f64)> {
    let z = codes_matrix(codes, bank.code_dim)?;
    direction_batch_grad(bank, params, &z, alphas, None)
}

/// Precompute semantic codes for a set of images under frozen models.
pub fn precompute_codes(
    encoder: &SemanticEncoder,
    classifier: &ClassifierModel,
    images: &[Pixels],
) -> Result<Vec<SemanticCode>> {
    crate::nn::ordered_par_map(images, |_, x| semantic_code_for(encoder, classifier, x))
        .into_iter()
        .collect()
}

/// Train the direction bank on precomputed codes. The encoder, denoiser and
/// classifier are untouched; only bank parameters move.
pub fn train_directions(
    mut bank: DirectionBank,
    codes: &[SemanticCode],
    seed: u64,
) -> Result<(DirectionBank, DirectionReport)> {
    if codes.len() < 2 {
        return Err(Error::Input("direction training needs at least 2 codes".into()));
    }
    let cfg = bank.cfg.clone();
    let mut opt = Adam::new(bank.n_params, cfg.lr);
    let mut shuffle_rng = stream_from(derive_seed(seed, "directions/shuffle"));
    let mut alpha_rng = stream_from(derive_seed(seed, "directions/alpha"));
    let mut order: Vec<usize> = (0..codes.len()).collect();
    let mut report = DirectionReport {
        contrastive_losses: Vec::new(),
        reg_losses: Vec::new(),
        total_losses: Vec::new(),
        mean_pairwise_abs_cosine: f64::NAN,
        seed,
        config_hash: format!(
            "{:016x}",
            fnv1a64(serde_json::to_string(&cfg).expect("config serializes").as_bytes())
        ),
    };

    for _epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = (shuffle_rng.gen::<f64>() * (i + 1) as f64).floor() as usize;
            order.swap(i, j.min(i));
        }
        let (mut ep_cont, mut ep_reg, mut n_batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<SemanticCode> = chunk.iter().map(|&i| codes[i].clone()).collect();
            let z = codes_matrix(&batch, bank.code_dim)?;
            let mut alphas = Array2::<f64>::zeros((batch.len(), cfg.k));
            for bi in 0..batch.len() {
                for k in 0..cfg.k {
                    let sign = if alpha_rng.gen::<f64>() < 0.5 { -1.0 } else { 1.0 };
                    let mag = cfg.alpha_min + (cfg.alpha_max - cfg.alpha_min) * alpha_rng.gen::<f64>();
                    alphas[[bi, k]] = sign * mag;
                }
            }
            let mut grads = vec![0.0; bank.n_params];
            let (l_cont, l_reg) =
                direction_batch_grad(&bank, &bank.params, &z, &alphas, Some(&mut grads))?;
            let total = l_cont + cfg.lambda2 * l_reg;
            if !total.is_finite() {
                return Err(Error::Training(format!(
                    "direction loss non-finite ({total}) at epoch {_epoch}"
                )));
            }
            opt.step(&mut bank.params, &grads);
            ep_cont += l_cont;
            ep_reg += l_reg;
            n_batches += 1;
        }
        report.contrastive_losses.push(ep_cont / n_batches as f64);
        report.reg_losses.push(ep_reg / n_batches as f64);
        report
            .total_losses
            .push((ep_cont + cfg.lambda2 * ep_reg) / n_batches as f64);
    }
    report.mean_pairwise_abs_cosine = mean_pairwise_abs_cosine(&bank, codes)?;
    Ok((bank, report))
}
