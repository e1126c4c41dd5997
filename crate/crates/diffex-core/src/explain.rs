//! Counterfactual generation and evaluation metrics.
//!
//! Metrics are plain functions: windowed structural similarity, mean squared
//! error, a classifier-feature perceptual distance (the desk-scale stand-in
//! for a pretrained perceptual net), an unbiased polynomial-kernel MMD^2
//! (KID over classifier features rather than Inception features; absolute
//! values are not comparable to Inception-based numbers), and argmax
//! agreement.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::classifier::{penult_features, ClassifierModel};
use crate::directions::{apply_direction, DirectionBank};
use crate::diffusion::{ddim_invert, ddim_sample};
use crate::error::{Error, Result};
use crate::imageio::{clamp01, Pixels};
use crate::ranking::PipelineModels;
use crate::semantic_ae::semantic_code_for;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let s2 = 2.0 * SSIM_SIGMA * SSIM_SIGMA;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / s2).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Valid-mode separable windowed filter with the normalized Gaussian.
fn window_filter(x: ArrayView2<f64>) -> Array2<f64> {
    let w = gaussian_window();
    let (h, wd) = x.dim();
    let hw = SSIM_WINDOW - 1;
    let mut horiz = Array2::<f64>::zeros((h, wd - hw));
    for i in 0..h {
        for j in 0..wd - hw {
            let mut acc = 0.0;
            for (k, &wk) in w.iter().enumerate() {
                acc += wk * x[[i, j + k]];
            }
            horiz[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h - hw, wd - hw));
    for i in 0..h - hw {
        for j in 0..wd - hw {
            let mut acc = 0.0;
            for (k, &wk) in w.iter().enumerate() {
                acc += wk * horiz[[i + k, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

fn check_same_shape(a: &Pixels, b: &Pixels) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Input(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5), dynamic
/// range 1, averaged over valid windows and channels. Symmetric in its
/// arguments.
pub fn ssim(a: &Pixels, b: &Pixels) -> Result<f64> {
    check_same_shape(a, b)?;
    let (c, h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "images must be at least {SSIM_WINDOW}px per side for ssim, got {h}x{w}"
        )));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = a.index_axis(ndarray::Axis(0), ch);
        let pb = b.index_axis(ndarray::Axis(0), ch);
        let mu_a = window_filter(pa);
        let mu_b = window_filter(pb);
        let aa = window_filter((&pa * &pa).view());
        let bb = window_filter((&pb * &pb).view());
        let ab = window_filter((&pa * &pb).view());
        for ((i, j), &ma) in mu_a.indexed_iter() {
            let mb = mu_b[[i, j]];
            let va = aa[[i, j]] - ma * ma;
            let vb = bb[[i, j]] - mb * mb;
            let cov = ab[[i, j]] - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean squared per-pixel difference.
pub fn mse(a: &Pixels, b: &Pixels) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok((a - b).mapv(|d| d * d).mean().unwrap_or(0.0))
}

/// Euclidean distance between classifier penultimate features, normalized by
/// the feature dimension.
pub fn perceptual_distance(a: &Pixels, b: &Pixels, classifier: &ClassifierModel) -> Result<f64> {
    check_same_shape(a, b)?;
    let feats = penult_features(classifier, &[a.clone(), b.clone()])?;
    let d: f64 = feats
        .row(0)
        .iter()
        .zip(feats.row(1).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok(d / classifier.feature_dim as f64)
}

fn poly_kernel(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut k = x.dot(&y.t());
    k.mapv_inplace(|v| {
        let u = v / d + 1.0;
        u * u * u
    });
    k
}

/// Unbiased MMD^2 estimate with the cubic polynomial kernel
/// (x.y/d + 1)^3, diagonal terms excluded from within-set sums. Slightly
/// negative values are expected from the unbiased estimator.
pub fn kid(features_a: ArrayView2<f64>, features_b: ArrayView2<f64>) -> Result<f64> {
    let (n, m) = (features_a.nrows(), features_b.nrows());
    if n < 2 || m < 2 {
        return Err(Error::Input(format!(
            "kid needs at least 2 rows per set, got {n} and {m}"
        )));
    }
    if features_a.ncols() != features_b.ncols() {
        return Err(Error::Input("kid feature dimensions differ".into()));
    }
    let kaa = poly_kernel(features_a, features_a);
    let kbb = poly_kernel(features_b, features_b);
    let kab = poly_kernel(features_a, features_b);
    let sum_off = |k: &Array2<f64>| -> f64 {
        let mut s = 0.0;
        for ((i, j), &v) in k.indexed_iter() {
            if i != j {
                s += v;
            }
        }
        s
    };
    let term_a = sum_off(&kaa) / (n * (n - 1)) as f64;
    let term_b = sum_off(&kbb) / (m * (m - 1)) as f64;
    let term_ab = 2.0 * kab.sum() / (n * m) as f64;
    Ok(term_a + term_b - term_ab)
}

/// Fraction of pairs whose classifier argmax agrees.
pub fn agreement(
    originals: &[Pixels],
    reconstructions: &[Pixels],
    classifier: &ClassifierModel,
) -> Result<f64> {
    if originals.len() != reconstructions.len() {
        return Err(Error::Input(format!(
            "agreement needs paired batches, got {} vs {}",
            originals.len(),
            reconstructions.len()
        )));
    }
    if originals.is_empty() {
        return Err(Error::Input("agreement needs at least one pair".into()));
    }
    let argmax = |p: &[f64]| if p[1] > p[0] { 1 } else { 0 };
    let same = crate::nn::ordered_par_map(originals, |i, x| {
        let px = classifier.probs_unchecked(x);
        let py = classifier.probs_unchecked(&reconstructions[i]);
        (argmax(&px) == argmax(&py)) as usize
    })
    .into_iter()
    .sum::<usize>();
    Ok(same as f64 / originals.len() as f64)
}

/// One source image shifted along one signed direction across a sweep of
/// alphas, with the classifier's verdict at every step.
#[derive(Debug, Clone)]
pub struct CounterfactualResult {
    pub source_id: usize,
    pub source: Pixels,
    pub direction: usize,
    pub sign: i8,
    pub alphas: Vec<f64>,
    pub images: Vec<Pixels>,
    /// Classifier probability row per alpha.
    pub prob_traces: Vec<Vec<f64>>,
    /// Index of the alpha = 0 entry (the reconstruction baseline).
    pub baseline_index: usize,
}

/// Generate counterfactuals for one source image. The inversion is computed
/// once and reused across the sweep; the alpha = 0 entry goes through the
/// unshifted code and therefore matches plain reconstruction bit for bit.
pub fn generate_counterfactual(
    source_id: usize,
    x: &Pixels,
    bank: &DirectionBank,
    k: usize,
    sign: i8,
    alphas: &[f64],
    models: &PipelineModels,
) -> Result<CounterfactualResult> {
    let baseline_index = alphas
        .iter()
        .position(|&a| a == 0.0)
        .ok_or_else(|| Error::Input("alpha sweep must include 0".into()))?;
    let code = semantic_code_for(models.encoder, models.classifier, x)?;
    let x_t = ddim_invert(x, &code, models.denoiser, models.schedule, models.n_steps)?;
    let mut images = Vec::with_capacity(alphas.len());
    let mut prob_traces = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let shifted = if alpha == 0.0 {
            code.clone()
        } else {
            apply_direction(bank, k, &code, sign as f64 * alpha)?
        };
        let mut img = ddim_sample(&x_t, &shifted, models.denoiser, models.schedule, models.n_steps)?;
        clamp01(&mut img);
        prob_traces.push(models.classifier.probs_unchecked(&img));
        images.push(img);
    }
    Ok(CounterfactualResult {
        source_id,
        source: x.clone(),
        direction: k,
        sign,
        alphas: alphas.to_vec(),
        images,
        prob_traces,
        baseline_index,
    })
}

// 5x7 bitmap glyphs for grid labels; each byte is one row, low 5 bits used.
fn glyph(ch: char) -> [u8; 7] {
    match ch {
        '0' => [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e],
        '1' => [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e],
        '2' => [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f],
        '3' => [0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e],
        '4' => [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02],
        '5' => [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e],
        '6' => [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e],
        '7' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
        '9' => [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c],
        '+' => [0x00, 0x04, 0x04, 0x1f, 0x04, 0x04, 0x00],
        '-' => [0x00, 0x00, 0x00, 0x1f, 0x00, 0x00, 0x00],
        '=' => [0x00, 0x00, 0x1f, 0x00, 0x1f, 0x00, 0x00],
        'a' => [0x00, 0x00, 0x0e, 0x01, 0x0f, 0x11, 0x0f],
        'p' => [0x00, 0x00, 0x1e, 0x11, 0x1e, 0x10, 0x10],
        _ => [0x00; 7],
    }
}

/// Stamp text into a channel of an image region, values set to `value`.
fn stamp_text(px: &mut Array3<f64>, channel: usize, top: usize, left: usize, text: &str, value: f64) {
    let (_, h, w) = px.dim();
    let mut x = left;
    for ch in text.chars() {
        let g = glyph(ch);
        for (row, bits) in g.iter().enumerate() {
            for col in 0..5 {
                if bits & (1 << (4 - col)) != 0 {
                    let (i, j) = (top + row, x + col);
                    if i < h && j < w {
                        px[[channel, i, j]] = value;
                        // dim other channels so the label reads as pure colour
                        for other in 0..3 {
                            if other != channel {
                                px[[other, i, j]] *= 0.2;
                            }
                        }
                    }
                }
            }
        }
        x += 6;
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GridSidecarRow {
    pub source_id: usize,
    pub probs: Vec<Vec<f64>>,
    /// Target-class probability as rendered on the tile, 2 decimals.
    pub prob_labels: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GridSidecar {
    pub schema_version: u32,
    pub direction: usize,
    pub sign: i8,
    pub target_class: usize,
    pub alphas: Vec<f64>,
    pub rows: Vec<GridSidecarRow>,
}

const GRID_HEADER: usize = 10;
const GRID_BORDER: usize = 1;

/// Render an alpha-sweep grid: rows are source images, columns the alpha
/// values; every tile carries the target-class probability (2 decimals)
/// stamped in the red channel. Writes a PNG plus a machine-readable JSON
/// sidecar next to it. Byte output is deterministic.
pub fn emit_grid(
    results: &[CounterfactualResult],
    target_class: usize,
    out_path: &Path,
) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Input("emit_grid needs at least one result".into()));
    }
    let alphas = &results[0].alphas;
    let n_cols = alphas.len();
    for r in results {
        if r.alphas != *alphas {
            return Err(Error::Input("all results must share the alpha sweep".into()));
        }
    }
    let side = results[0].source.dim().1;
    let tile = side + GRID_BORDER;
    let width = n_cols * tile + GRID_BORDER;
    let height = GRID_HEADER + results.len() * tile + GRID_BORDER;
    let mut canvas = Array3::<f64>::from_elem((3, height, width), 0.08);

    // header band: alpha labels
    for (ci, &alpha) in alphas.iter().enumerate() {
        let label = format!("a={}{:.1}", if alpha >= 0.0 { "+" } else { "-" }, alpha.abs());
        stamp_text(
            &mut canvas,
            1,
            1,
            GRID_BORDER + ci * tile + 2,
            &label,
            0.9,
        );
    }
    let mut sidecar_rows = Vec::new();
    for (ri, r) in results.iter().enumerate() {
        let top = GRID_HEADER + ri * tile;
        let mut labels = Vec::new();
        for (ci, img) in r.images.iter().enumerate() {
            let left = GRID_BORDER + ci * tile;
            for c in 0..3 {
                for i in 0..side {
                    for j in 0..side {
                        canvas[[c, top + i, left + j]] = img[[c, i, j]];
                    }
                }
            }
            let p = r.prob_traces[ci][target_class];
            let label = format!("{p:.2}");
            stamp_text(&mut canvas, 0, top + 2, left + 2, &label, 1.0);
            labels.push(label);
        }
        sidecar_rows.push(GridSidecarRow {
            source_id: r.source_id,
            probs: r.prob_traces.clone(),
            prob_labels: labels,
        });
    }
    crate::imageio::write_png(out_path, &canvas)?;
    let sidecar = GridSidecar {
        schema_version: 1,
        direction: results[0].direction,
        sign: results[0].sign,
        target_class,
        alphas: alphas.clone(),
        rows: sidecar_rows,
    };
    let sidecar_path = out_path.with_extension("json");
    std::fs::write(
        &sidecar_path,
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )
    .map_err(|e| Error::io(sidecar_path.display().to_string(), e))?;
    Ok(())
}

/// Reconstruction metrics over a paired set of originals and reconstructions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim: f64,
    pub mse: f64,
    pub perceptual: f64,
    pub kid: f64,
    pub agreement: f64,
    pub n_samples: usize,
}

impl MetricReport {
    /// Key/value text format, schema version 1.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "schema_version: 1");
        let _ = writeln!(s, "n_samples: {}", self.n_samples);
        let _ = writeln!(s, "ssim: {}", self.ssim);
        let _ = writeln!(s, "mse: {}", self.mse);
        let _ = writeln!(s, "perceptual: {}", self.perceptual);
        let _ = writeln!(s, "kid: {}", self.kid);
        let _ = writeln!(s, "agreement: {}", self.agreement);
        s
    }

    pub fn from_text(text: &str) -> Result<MetricReport> {
        let mut map = std::collections::BTreeMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once(':') {
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| -> Result<f64> {
            map.get(k)
                .ok_or_else(|| Error::Input(format!("metrics file missing key `{k}`")))?
                .parse::<f64>()
                .map_err(|e| Error::Input(format!("bad value for `{k}`: {e}")))
        };
        if map.get("schema_version").map(String::as_str) != Some("1") {
            return Err(Error::Input("unsupported metrics schema version".into()));
        }
        Ok(MetricReport {
            ssim: get("ssim")?,
            mse: get("mse")?,
            perceptual: get("perceptual")?,
            kid: get("kid")?,
            agreement: get("agreement")?,
            n_samples: get("n_samples")? as usize,
        })
    }
}

/// Reconstruct every image and compute the full metric panel.
pub fn reconstruction_metrics(images: &[Pixels], models: &PipelineModels) -> Result<MetricReport> {
    if images.is_empty() {
        return Err(Error::Input("metrics need at least one image".into()));
    }
    let recons: Vec<Pixels> = crate::nn::ordered_par_map(images, |_, x| -> Result<Pixels> {
        crate::semantic_ae::reconstruct(
            x,
            models.encoder,
            models.denoiser,
            models.classifier,
            models.schedule,
            models.n_steps,
        )
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut ssim_sum = 0.0;
    let mut mse_sum = 0.0;
    let mut perc_sum = 0.0;
    for (x, r) in images.iter().zip(&recons) {
        ssim_sum += ssim(x, r)?;
        mse_sum += mse(x, r)?;
        perc_sum += perceptual_distance(x, r, models.classifier)?;
    }
    let n = images.len();
    let feats_a = penult_features(models.classifier, images)?;
    let feats_b = penult_features(models.classifier, &recons)?;
    let kid_v = if n >= 2 {
        kid(feats_a.view(), feats_b.view())?
    } else {
        0.0
    };
    Ok(MetricReport {
        ssim: ssim_sum / n as f64,
        mse: mse_sum / n as f64,
        perceptual: perc_sum / n as f64,
        kid: kid_v,
        agreement: agreement(images, &recons, models.classifier)?,
        n_samples: n,
    })
}
