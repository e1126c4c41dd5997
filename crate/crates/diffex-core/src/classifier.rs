//! The frozen binary classifier whose decisions the pipeline explains.
//!
//! Three stride-2 conv blocks, global average pooling, linear head. The
//! pooled penultimate vector doubles as the feature embedding for the
//! perceptual-distance and KID metrics.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::DatasetSplit;
use crate::error::{Error, Result};
use crate::imageio::Pixels;
use crate::nn::{
    chunked_batch_grad, ordered_par_map, silu, silu_backward, softmax_row, Adam, Conv2d,
    GroupNorm, Layout, Linear,
};
use crate::rng::{derive_seed, param_checksum, stream_from};

pub const N_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Channel widths of the three conv blocks; the last is the feature dim.
    pub channels: [usize; 3],
    /// Amplitude of additive uniform training noise. Keeps the frozen model
    /// robust to the mild artifacts of diffusion reconstructions.
    pub augment_noise: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            epochs: 4,
            batch_size: 32,
            lr: 2e-3,
            channels: [16, 32, 64],
            augment_noise: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// One entry per epoch; empty when there is no validation split.
    pub val_accuracy: Vec<f64>,
    /// None when the test split is empty.
    pub test_accuracy: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
}

fn pick_groups(c: usize) -> usize {
    for g in [8, 4, 2, 1] {
        if c.is_multiple_of(g) {
            return g;
        }
    }
    1
}

#[derive(Debug)]
pub struct ClassifierNet {
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
    conv3: Conv2d,
    gn3: GroupNorm,
    head: Linear,
    n_params: usize,
}

pub struct ClassifierCache {
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
}

impl ClassifierNet {
    pub fn new(channels: [usize; 3]) -> Self {
        let [c1, c2, c3] = channels;
        let mut l = Layout::new();
        let net = ClassifierNet {
            conv1: Conv2d::new(&mut l, 3, c1, 3, 2, 1),
            gn1: GroupNorm::new(&mut l, c1, pick_groups(c1)),
            conv2: Conv2d::new(&mut l, c1, c2, 3, 2, 1),
            gn2: GroupNorm::new(&mut l, c2, pick_groups(c2)),
            conv3: Conv2d::new(&mut l, c2, c3, 3, 2, 1),
            gn3: GroupNorm::new(&mut l, c3, pick_groups(c3)),
            head: Linear::new(&mut l, c3, N_CLASSES),
            n_params: 0,
        };
        ClassifierNet {
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

    /// Forward to (logits, penultimate features) with the cache needed for
    /// backprop.
    pub fn forward_cached(&self, p: &[f64], x: &Pixels) -> (Vec<f64>, ClassifierCache) {
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
        let logits = self.head.forward(p, pooled_row.view()).row(0).to_vec();
        (
            logits,
            ClassifierCache {
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
            },
        )
    }

    /// Backprop from d(logits); accumulates parameter grads into `g` and
    /// returns the input gradient.
    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        cache: &ClassifierCache,
        dlogits: &[f64],
    ) -> Pixels {
        let n_feat = cache.pooled.len();
        let pooled_row =
            Array2::from_shape_vec((1, n_feat), cache.pooled.clone()).expect("row");
        let dl_row = Array2::from_shape_vec((1, dlogits.len()), dlogits.to_vec()).expect("row");
        let dpooled = self.head.backward(p, g, pooled_row.view(), dl_row.view());
        let (_, h, w) = cache.s3.dim();
        let hw = (h * w) as f64;
        let mut ds3 = Array3::<f64>::zeros(cache.s3.dim());
        for (c, mut plane) in ds3.outer_iter_mut().enumerate() {
            let v = dpooled[[0, c]] / hw;
            plane.fill(v);
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
        self.conv1.backward(p, g, cache.x.view(), dc1.view())
    }
}

/// A frozen classifier. Parameters are private; downstream stages can only
/// read them through inference calls and the checksum.
pub struct ClassifierModel {
    net: ClassifierNet,
    params: Vec<f64>,
    pub config: ClassifierConfig,
    pub feature_dim: usize,
}

impl ClassifierModel {
    pub fn from_parts(net: ClassifierNet, params: Vec<f64>, config: ClassifierConfig) -> Self {
        let feature_dim = config.channels[2];
        ClassifierModel {
            net,
            params,
            config,
            feature_dim,
        }
    }

    pub fn checksum(&self) -> u64 {
        param_checksum(&self.params)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn net(&self) -> &ClassifierNet {
        &self.net
    }

    fn validate_image(&self, x: &Pixels) -> Result<()> {
        let (c, _, _) = x.dim();
        if c != 3 {
            return Err(Error::Input(format!("expected 3 channels, got {c}")));
        }
        if x.iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
            return Err(Error::Input("image values must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Raw forward without the [0,1] domain check; used internally on
    /// unclamped one-step reconstructions.
    pub fn probs_unchecked(&self, x: &Pixels) -> Vec<f64> {
        let (logits, _) = self.net.forward_cached(&self.params, x);
        softmax_row(&logits)
    }

    pub fn logits_cached(&self, x: &Pixels) -> (Vec<f64>, ClassifierCache) {
        self.net.forward_cached(&self.params, x)
    }

    /// Input gradient of a function of the logits; parameter grads discarded.
    pub fn input_grad(&self, cache: &ClassifierCache, dlogits: &[f64]) -> Pixels {
        let mut scratch = vec![0.0; self.params.len()];
        self.net.backward(&self.params, &mut scratch, cache, dlogits)
    }
}

/// Probability rows for a batch; each row is non-negative and sums to 1.
pub fn predict_probs(model: &ClassifierModel, images: &[Pixels]) -> Result<Array2<f64>> {
    for im in images {
        model.validate_image(im)?;
    }
    let rows = ordered_par_map(images, |_, im| model.probs_unchecked(im));
    let mut out = Array2::zeros((images.len(), N_CLASSES));
    for (i, r) in rows.into_iter().enumerate() {
        for (j, v) in r.into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    Ok(out)
}

/// Penultimate (pooled) feature rows for a batch.
pub fn penult_features(model: &ClassifierModel, images: &[Pixels]) -> Result<Array2<f64>> {
    for im in images {
        model.validate_image(im)?;
    }
    let rows = ordered_par_map(images, |_, im| {
        let (_, cache) = model.net.forward_cached(&model.params, im);
        cache.pooled
    });
    let mut out = Array2::zeros((images.len(), model.feature_dim));
    for (i, r) in rows.into_iter().enumerate() {
        for (j, v) in r.into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    Ok(out)
}

fn accuracy(model: &ClassifierModel, images: &[LabeledRef]) -> f64 {
    assert!(!images.is_empty());
    let correct = ordered_par_map(images, |_, im| {
        let probs = model.probs_unchecked(im.pixels);
        let pred = if probs[1] > probs[0] { 1u8 } else { 0u8 };
        (pred == im.label) as usize
    })
    .into_iter()
    .sum::<usize>();
    correct as f64 / images.len() as f64
}

struct LabeledRef<'a> {
    pixels: &'a Pixels,
    label: u8,
}

/// Train and freeze the classifier. Deterministic given (split, config, seed).
pub fn train_classifier(
    split: &DatasetSplit,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<(ClassifierModel, TrainReport)> {
    if split.train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let n_pos = split.train.iter().filter(|im| im.label == 1).count();
    if n_pos == 0 || n_pos == split.train.len() {
        return Err(Error::Input(
            "training split contains a single class; the task is degenerate".into(),
        ));
    }
    let net = ClassifierNet::new(cfg.channels);
    let mut params = net.init_params(derive_seed(seed, "classifier/init"));
    let mut opt = Adam::new(params.len(), cfg.lr);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut shuffle_rng = stream_from(derive_seed(seed, "classifier/shuffle"));
    let mut epoch_losses = Vec::new();
    let mut val_accuracy = Vec::new();

    let model_view = |params: &[f64]| ClassifierModel {
        net: ClassifierNet::new(cfg.channels),
        params: params.to_vec(),
        config: cfg.clone(),
        feature_dim: cfg.channels[2],
    };

    let mut noise_rng = stream_from(derive_seed(seed, "classifier/augment"));
    for _epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = (shuffle_rng.gen::<f64>() * (i + 1) as f64).floor() as usize;
            order.swap(i, j.min(i));
        }
        let mut epoch_loss = 0.0;
        let mut n_seen = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            // augmentation noise drawn sequentially so the stream does not
            // depend on thread interleaving
            let batch: Vec<(&crate::datagen::LabeledImage, Option<Pixels>)> = batch_idx
                .iter()
                .map(|&i| {
                    let im = &split.train[i];
                    let noise = (cfg.augment_noise > 0.0).then(|| {
                        let mut n = Array3::zeros(im.pixels.dim());
                        for v in n.iter_mut() {
                            *v = cfg.augment_noise * (2.0 * noise_rng.gen::<f64>() - 1.0);
                        }
                        n
                    });
                    (im, noise)
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let (mut grads, loss_sum) =
                chunked_batch_grad(&batch, 8, params.len(), |_, (im, noise), g| {
                    let x = match noise {
                        Some(n) => im.pixels.clone() + n,
                        None => im.pixels.clone(),
                    };
                    let (logits, cache) = net.forward_cached(&params, &x);
                    let probs = softmax_row(&logits);
                    let loss = -probs[im.label as usize].max(1e-12).ln();
                    let mut dlogits = probs;
                    dlogits[im.label as usize] -= 1.0;
                    for d in dlogits.iter_mut() {
                        *d *= scale;
                    }
                    net.backward(&params, g, &cache, &dlogits);
                    loss
                });
            let batch_loss = loss_sum * scale;
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "classifier loss became non-finite ({batch_loss}) after {n_seen} samples"
                )));
            }
            for g in grads.iter_mut() {
                if !g.is_finite() {
                    return Err(Error::Training("non-finite gradient in classifier".into()));
                }
            }
            opt.step(&mut params, &grads);
            epoch_loss += loss_sum;
            n_seen += batch.len();
        }
        epoch_losses.push(epoch_loss / n_seen as f64);
        if !split.val.is_empty() {
            let snapshot = model_view(&params);
            let val_refs: Vec<LabeledRef> = split
                .val
                .iter()
                .map(|im| LabeledRef {
                    pixels: &im.pixels,
                    label: im.label,
                })
                .collect();
            val_accuracy.push(accuracy(&snapshot, &val_refs));
        }
    }

    let model = ClassifierModel::from_parts(net, params, cfg.clone());
    let test_refs: Vec<LabeledRef> = split
        .test
        .iter()
        .map(|im| LabeledRef {
            pixels: &im.pixels,
            label: im.label,
        })
        .collect();
    let test_accuracy = if test_refs.is_empty() {
        None
    } else {
        Some(accuracy(&model, &test_refs))
    };
    let config_hash = format!(
        "{:016x}",
        crate::rng::fnv1a64(serde_json::to_string(cfg).expect("config serializes").as_bytes())
    );
    Ok((
        model,
        TrainReport {
            epoch_losses,
            val_accuracy,
            test_accuracy,
            seed,
            config_hash,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, DatagenConfig};
    use ndarray::Array3;

    fn tiny_split() -> DatasetSplit {
        let cfg = DatagenConfig {
            n_images: 80,
            side: 32,
            ..DatagenConfig::default()
        };
        generate_dataset(&cfg, 17).unwrap()
    }

    fn tiny_cfg() -> ClassifierConfig {
        ClassifierConfig {
            epochs: 10,
            batch_size: 16,
            lr: 3e-3,
            channels: [8, 16, 32],
            augment_noise: 0.05,
        }
    }

    #[test]
    fn probs_form_simplex_rows() {
        let net = ClassifierNet::new([8, 16, 32]);
        let params = net.init_params(3);
        let model = ClassifierModel::from_parts(net, params, tiny_cfg());
        let images = vec![
            Array3::zeros((3, 32, 32)),
            Array3::from_elem((3, 32, 32), 1.0),
            Array3::from_shape_fn((3, 32, 32), |(c, i, j)| {
                (((c + i + j) as f64) * 0.1).sin().abs().min(1.0)
            }),
        ];
        let probs = predict_probs(&model, &images).unwrap();
        for row in probs.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn rejects_out_of_range_images() {
        let net = ClassifierNet::new([8, 16, 32]);
        let params = net.init_params(3);
        let model = ClassifierModel::from_parts(net, params, tiny_cfg());
        let bad = vec![Array3::from_elem((3, 32, 32), 1.5)];
        assert!(predict_probs(&model, &bad).is_err());
    }

    #[test]
    fn features_are_deterministic_and_sized() {
        let net = ClassifierNet::new([8, 16, 32]);
        let params = net.init_params(9);
        let model = ClassifierModel::from_parts(net, params, tiny_cfg());
        let im = Array3::from_elem((3, 32, 32), 0.4);
        let f1 = penult_features(&model, std::slice::from_ref(&im)).unwrap();
        let f2 = penult_features(&model, &[im]).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.ncols(), model.feature_dim);
    }

    #[test]
    fn single_class_split_rejected() {
        let mut split = tiny_split();
        split.train.retain(|im| im.label == 0);
        assert!(matches!(
            train_classifier(&split, &tiny_cfg(), 1),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn training_learns_and_is_seed_deterministic() {
        let split = tiny_split();
        let (m1, r1) = train_classifier(&split, &tiny_cfg(), 42).unwrap();
        let (m2, _r2) = train_classifier(&split, &tiny_cfg(), 42).unwrap();
        assert_eq!(m1.checksum(), m2.checksum());
        let acc = r1.test_accuracy.expect("test split present");
        assert!(acc >= 0.9, "tiny-split accuracy {acc}");
        // class-0 prototype leans class 0
        let proto = split
            .train
            .iter()
            .find(|im| im.label == 0)
            .unwrap()
            .pixels
            .clone();
        let probs = predict_probs(&m1, &[proto]).unwrap();
        assert!(probs[[0, 0]] > 0.5);
        // KL self-consistency: D_KL[C(x) || C(x)] = 0 exactly
        let p = m1.probs_unchecked(&split.test[0].pixels);
        let kl: f64 = p.iter().map(|&pi| pi * (pi.ln() - pi.ln())).sum();
        assert_eq!(kl, 0.0);
    }

    #[test]
    fn frozen_features_linearly_separable() {
        let split = tiny_split();
        let (model, _) = train_classifier(&split, &tiny_cfg(), 7).unwrap();
        let train_imgs: Vec<Pixels> = split.train.iter().map(|im| im.pixels.clone()).collect();
        let feats = penult_features(&model, &train_imgs).unwrap();
        // class-mean direction probe fitted on train, evaluated on test
        let d = model.feature_dim;
        let mut mu0 = vec![0.0; d];
        let mut mu1 = vec![0.0; d];
        let (mut n0, mut n1) = (0.0, 0.0);
        for (row, im) in feats.rows().into_iter().zip(&split.train) {
            let (mu, n) = if im.label == 0 {
                (&mut mu0, &mut n0)
            } else {
                (&mut mu1, &mut n1)
            };
            for (m, &v) in mu.iter_mut().zip(row.iter()) {
                *m += v;
            }
            *n += 1.0;
        }
        for m in mu0.iter_mut() {
            *m /= n0;
        }
        for m in mu1.iter_mut() {
            *m /= n1;
        }
        let w: Vec<f64> = mu1.iter().zip(&mu0).map(|(a, b)| a - b).collect();
        let mid: f64 = mu1
            .iter()
            .zip(&mu0)
            .zip(&w)
            .map(|((a, b), wi)| wi * 0.5 * (a + b))
            .sum();
        let test_imgs: Vec<Pixels> = split.test.iter().map(|im| im.pixels.clone()).collect();
        let test_feats = penult_features(&model, &test_imgs).unwrap();
        let correct = test_feats
            .rows()
            .into_iter()
            .zip(&split.test)
            .filter(|(row, im)| {
                let score: f64 = row.iter().zip(&w).map(|(v, wi)| v * wi).sum();
                ((score > mid) as u8) == im.label
            })
            .count();
        let acc = correct as f64 / split.test.len() as f64;
        assert!(acc >= 0.9, "probe accuracy {acc}");
    }
}
