//! Acceptance suite: every release gate runs here, one test per criterion,
//! each printing a PASS line with the measured values. The desk-scale
//! pipeline (criteria 4 and 5) trains once under the default configuration
//! and is shared by the tests that read its artifacts.

use std::path::PathBuf;
use std::sync::OnceLock;

use ndarray::{Array2, Array3};
use rand::Rng;

use diffex_core::classifier::N_CLASSES;
use diffex_core::config::ExperimentConfig;
use diffex_core::datagen::{cytoplasm_mean, nucleus_blob_count};
use diffex_core::diffusion::{ddim_sample, make_schedule, NoisePredictor};
use diffex_core::directions::{
    apply_direction, contrastive_loss, covariance_reg, direction_loss_at, direction_loss_grad,
    DirectionBank, DirectionsConfig, FeatureDivergence,
};
use diffex_core::explain::kid;
use diffex_core::imageio::Pixels;
use diffex_core::nn::{fill_standard_normal, finite_diff_grad, max_rel_err};
use diffex_core::pipeline::{
    load_classifier, load_directions, load_ranking_report, load_sdae, run_all, ArtifactPaths,
};
use diffex_core::ranking::{candidate_order, greedy_rank, PipelineModels, RankingConfig};
use diffex_core::rng::stream;
use diffex_core::semantic_ae::{
    draw_noise, kl_div, SdaeConfig, SdaeTrainer, SemanticCode,
};

fn tmp_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
}

// ---------------------------------------------------------------------------
// criterion 1: analytic oracles (no training)
// ---------------------------------------------------------------------------

fn contrastive_oracle(f: &ndarray::Array3<f64>, tau: f64) -> f64 {
    let (b, k_dirs, d_f) = f.dim();
    let cos = |a: (usize, usize), c: (usize, usize)| -> f64 {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nc = 0.0;
        for d in 0..d_f {
            dot += f[[a.0, a.1, d]] * f[[c.0, c.1, d]];
            na += f[[a.0, a.1, d]] * f[[a.0, a.1, d]];
            nc += f[[c.0, c.1, d]] * f[[c.0, c.1, d]];
        }
        dot / (na.sqrt() * nc.sqrt())
    };
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..b {
        for k in 0..k_dirs {
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..b {
                if j != i {
                    num += (cos((i, k), (j, k)) / tau).exp();
                }
                for l in 0..k_dirs {
                    if l != k {
                        den += (cos((i, k), (j, l)) / tau).exp();
                    }
                }
            }
            total += -(num / den).ln();
            n += 1;
        }
    }
    total / n as f64
}

fn covariance_oracle(units: &[Array2<f64>]) -> f64 {
    let k_dirs = units.len();
    let b = units[0].nrows();
    let d = units[0].ncols();
    let mut loss = 0.0;
    for ki in 0..k_dirs {
        for kj in 0..k_dirs {
            if ki == kj {
                continue;
            }
            for p in 0..d {
                for q in 0..d {
                    let mp: f64 = (0..b).map(|x| units[ki][[x, p]]).sum::<f64>() / b as f64;
                    let mq: f64 = (0..b).map(|x| units[kj][[x, q]]).sum::<f64>() / b as f64;
                    let c: f64 = (0..b)
                        .map(|x| (units[ki][[x, p]] - mp) * (units[kj][[x, q]] - mq))
                        .sum::<f64>()
                        / b as f64;
                    loss += c * c;
                }
            }
        }
    }
    loss
}

fn random_codes(n: usize, dim: usize, seed: u64) -> Vec<SemanticCode> {
    let mut rng = stream(seed, "accept-codes");
    (0..n)
        .map(|_| {
            let data: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            SemanticCode::from_raw(dim - N_CLASSES, N_CLASSES, data)
        })
        .collect()
}

#[test]
fn criterion_1_analytic_oracle_suite() {
    // contrastive loss vs naive loop oracle, randomized instances
    let mut rng = stream(1001, "c1");
    let mut worst_cont: f64 = 0.0;
    for &(b, k, d) in &[(2usize, 2usize, 2usize), (3, 2, 3), (4, 3, 4), (3, 3, 2)] {
        let f = ndarray::Array3::from_shape_fn((b, k, d), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let mine = contrastive_loss(&FeatureDivergence { f: f.clone() }, 0.7).unwrap();
        let oracle = contrastive_oracle(&f, 0.7);
        worst_cont = worst_cont.max((mine - oracle).abs());
    }
    assert!(worst_cont < 1e-5, "ACCEPT-1 FAIL: contrastive oracle gap {worst_cont}");

    // covariance regularizer vs per-entry oracle on a real bank
    let dim = 4;
    let bank = DirectionBank::new(
        dim,
        DirectionsConfig {
            k: 3,
            d_f: 4,
            mlp1_hidden: 5,
            mlp2_hidden: 5,
            ..DirectionsConfig::default()
        },
        7,
    )
    .unwrap();
    let codes = random_codes(6, dim, 1002);
    let mine = covariance_reg(&bank, &codes).unwrap();
    // reproduce the unit directions through apply_direction displacements
    let mut units: Vec<Array2<f64>> = Vec::new();
    for k in 0..3 {
        let mut u = Array2::zeros((codes.len(), dim));
        for (bi, code) in codes.iter().enumerate() {
            let shifted = apply_direction(&bank, k, code, 1.0).unwrap();
            for j in 0..dim {
                u[[bi, j]] = shifted[j] - code[j];
            }
        }
        units.push(u);
    }
    let oracle = covariance_oracle(&units);
    let cov_gap = (mine - oracle).abs();
    assert!(cov_gap < 1e-6, "ACCEPT-1 FAIL: covariance oracle gap {cov_gap}");

    // KL hand value
    let kl = kl_div(&[0.9, 0.1], &[0.5, 0.5]);
    assert!(
        (kl - 0.368).abs() < 1e-3,
        "ACCEPT-1 FAIL: KL hand value {kl} != 0.368"
    );

    // shift-norm invariant over 1000 random (k, z, alpha)
    let bank_dim = 10;
    let bank = DirectionBank::new(
        bank_dim,
        DirectionsConfig {
            k: 5,
            d_f: 8,
            mlp1_hidden: 8,
            mlp2_hidden: 8,
            ..DirectionsConfig::default()
        },
        13,
    )
    .unwrap();
    let mut worst_norm: f64 = 0.0;
    let mut rng = stream(1003, "c1-shift");
    for _ in 0..1000 {
        let code = random_codes(1, bank_dim, rng.gen()).pop().unwrap();
        let k = (rng.gen::<f64>() * 5.0) as usize;
        let alpha = rng.gen::<f64>() * 8.0 - 4.0;
        let shifted = apply_direction(&bank, k, &code, alpha).unwrap();
        let disp: f64 = shifted
            .iter()
            .zip(code.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        worst_norm = worst_norm.max((disp - alpha.abs()).abs());
    }
    assert!(worst_norm < 1e-6, "ACCEPT-1 FAIL: shift-norm deviation {worst_norm}");
    println!(
        "ACCEPT-1 PASS: contrastive gap {worst_cont:.2e}, covariance gap {cov_gap:.2e}, KL {kl:.4}, shift-norm dev {worst_norm:.2e}"
    );
}

// ---------------------------------------------------------------------------
// criterion 2: diffusion mechanics
// ---------------------------------------------------------------------------

struct ZeroDenoiser;
impl NoisePredictor for ZeroDenoiser {
    fn predict_noise(&self, x: &Pixels, _t: usize, _cond: &[f64]) -> Pixels {
        Array3::zeros(x.dim())
    }
}

#[test]
fn criterion_2_diffusion_mechanics_suite() {
    // strict monotonicity for several schedules
    for &(t, b0, b1) in &[(1000usize, 1e-4, 0.02), (50, 1e-3, 0.1), (2, 0.1, 0.2)] {
        let s = make_schedule(t, b0, b1).unwrap();
        for w in s.alpha_bars.windows(2) {
            assert!(w[1] < w[0], "ACCEPT-2 FAIL: alpha-bar not strictly decreasing");
        }
    }
    // hand-computed T=2 case, exact
    let s2 = make_schedule(2, 0.1, 0.2).unwrap();
    assert!(
        (s2.alpha_bar(1) - 0.9).abs() < 1e-15 && (s2.alpha_bar(2) - 0.72).abs() < 1e-15,
        "ACCEPT-2 FAIL: T=2 alpha-bars {} {}",
        s2.alpha_bar(1),
        s2.alpha_bar(2)
    );

    // q_sample / predict_x0 round trip within 1e-6
    let s = make_schedule(100, 1e-4, 0.05).unwrap();
    let mut rng = stream(2001, "c2");
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut x0 = Array3::zeros((3, 8, 8));
        let mut eps = Array3::zeros((3, 8, 8));
        fill_standard_normal(x0.as_slice_mut().unwrap(), &mut rng);
        fill_standard_normal(eps.as_slice_mut().unwrap(), &mut rng);
        let t = 1 + (rng.gen::<f64>() * 100.0) as usize;
        let t = t.min(100);
        let xt = diffex_core::diffusion::q_sample(&x0, t, &eps, &s).unwrap();
        let back = diffex_core::diffusion::predict_x0(&xt, t, &eps, &s).unwrap();
        for (a, b) in back.iter().zip(x0.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-6, "ACCEPT-2 FAIL: round-trip error {worst}");

    // DDIM determinism, bit exact
    let den = ZeroDenoiser;
    let mut xt = Array3::zeros((3, 8, 8));
    fill_standard_normal(xt.as_slice_mut().unwrap(), &mut rng);
    let a = ddim_sample(&xt, &[], &den, &s, 10).unwrap();
    let b = ddim_sample(&xt, &[], &den, &s, 10).unwrap();
    assert!(
        a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
        "ACCEPT-2 FAIL: ddim sampling not bit-deterministic"
    );
    println!(
        "ACCEPT-2 PASS: monotone schedules, T=2 hand case exact, round trip {worst:.2e}, ddim bit-deterministic"
    );
}

// ---------------------------------------------------------------------------
// criterion 3: gradient suite (finite differences, double precision)
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_gradient_suite() {
    // semantic-ae losses on toy sizes
    let cfg = SdaeConfig {
        t_max: 10,
        beta_start: 0.01,
        beta_end: 0.1,
        d_z: 3,
        lambda1: 0.7,
        epochs: 1,
        batch_size: 2,
        lr: 1e-3,
        n_steps: 3,
        grad_clip: 0.0,
        emb_dim: 4,
        denoiser_channels: [2, 2, 3, 3],
        encoder_channels: [2, 2, 2],
        full_sampling_cls: false,
        ablate_cls: false,
        ema_decay: 0.0,
        lr_decay: 1.0,
    };
    let trainer = SdaeTrainer::new(&cfg);
    let x = Array3::from_shape_fn((3, 16, 16), |(c, i, j)| (((c + i + j) as f64) * 0.23).sin().abs());
    // pick the amplification that puts the random classifier's probabilities
    // mid-simplex: uniform probabilities and saturated ones both flatten the
    // KL gradient to nothing
    let clf = [4.0, 3.0, 2.0, 1.5, 1.2, 1.0]
        .into_iter()
        .map(|scale| {
            let net = diffex_core::classifier::ClassifierNet::new([4, 4, 8]);
            let params: Vec<f64> = net.init_params(31).iter().map(|p| p * scale).collect();
            diffex_core::classifier::ClassifierModel::from_parts(
                net,
                params,
                diffex_core::classifier::ClassifierConfig {
                    channels: [4, 4, 8],
                    ..Default::default()
                },
            )
        })
        .find(|clf| {
            let p = clf.probs_unchecked(&x);
            (0.10..=0.90).contains(&p[0])
        })
        .expect("an amplification keeps the probabilities mid-simplex");
    let schedule = make_schedule(cfg.t_max, cfg.beta_start, cfg.beta_end).unwrap();
    let mut params = trainer.init_params(3001);
    let mut rng = stream(3002, "c3");
    let mut jitter = vec![0.0; params.len()];
    fill_standard_normal(&mut jitter, &mut rng);
    for (p, j) in params.iter_mut().zip(&jitter) {
        *p += 0.05 * j;
    }
    let mut draw_rng = stream(3003, "c3-draw");
    let draw = draw_noise(&mut draw_rng, cfg.t_max, x.dim());

    // L_diffusion alone (lambda1 = 0 path)
    let mut t0 = SdaeTrainer::new(&cfg);
    t0.lambda1 = 0.0;
    let fd_diff = finite_diff_grad(&mut params, |p| {
        t0.sample_loss_grad(p, &clf, &schedule, &x, &draw, 1.0, None).diffusion
    });
    let mut g_diff = vec![0.0; params.len()];
    t0.sample_loss_grad(&params, &clf, &schedule, &x, &draw, 1.0, Some(&mut g_diff));
    let err_diff = max_rel_err(&g_diff, &fd_diff);
    assert!(err_diff < 1e-3, "ACCEPT-3 FAIL: L_diffusion grad err {err_diff}");

    // composite L_sem = L_diffusion + lambda1 L_cls, and L_cls by linearity
    let fd_sem = finite_diff_grad(&mut params, |p| {
        trainer
            .sample_loss_grad(p, &clf, &schedule, &x, &draw, 1.0, None)
            .total(trainer.lambda1)
    });
    let mut g_sem = vec![0.0; params.len()];
    trainer.sample_loss_grad(&params, &clf, &schedule, &x, &draw, 1.0, Some(&mut g_sem));
    let err_sem = max_rel_err(&g_sem, &fd_sem);
    assert!(err_sem < 1e-3, "ACCEPT-3 FAIL: L_sem grad err {err_sem}");
    let g_cls: Vec<f64> = g_sem
        .iter()
        .zip(&g_diff)
        .map(|(s, d)| (s - d) / trainer.lambda1)
        .collect();
    let fd_cls: Vec<f64> = fd_sem
        .iter()
        .zip(&fd_diff)
        .map(|(s, d)| (s - d) / trainer.lambda1)
        .collect();
    // the check must not pass vacuously on a zero gradient
    let cls_norm: f64 = g_cls.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(cls_norm > 1e-4, "ACCEPT-3 FAIL: KL gradient degenerate ({cls_norm:.2e})");
    let err_cls = max_rel_err(&g_cls, &fd_cls);
    assert!(err_cls < 1e-3, "ACCEPT-3 FAIL: L_cls grad err {err_cls}");

    // direction losses: L_cont and L_reg against finite differences
    let dim = 4;
    let bank = DirectionBank::new(
        dim,
        DirectionsConfig {
            k: 2,
            d_f: 3,
            mlp1_hidden: 5,
            mlp2_hidden: 6,
            tau: 0.5,
            lambda2: 0.9,
            ..DirectionsConfig::default()
        },
        3005,
    )
    .unwrap();
    let codes = random_codes(3, dim, 3006);
    let mut arng = stream(3007, "c3-alpha");
    let alphas = Array2::from_shape_fn((3, 2), |_| {
        let sign = if arng.gen::<f64>() < 0.5 { -1.0 } else { 1.0 };
        sign * (0.5 + arng.gen::<f64>())
    });
    let (_, _, grads) = direction_loss_grad(&bank, &codes, &alphas, true).unwrap();
    let g_dir = grads.unwrap();
    let mut bank_params = bank.params.clone();
    let fd_cont = finite_diff_grad(&mut bank_params, |p| {
        direction_loss_at(&bank, p, &codes, &alphas).unwrap().0
    });
    let fd_reg = finite_diff_grad(&mut bank_params, |p| {
        direction_loss_at(&bank, p, &codes, &alphas).unwrap().1
    });
    let fd_total: Vec<f64> = fd_cont
        .iter()
        .zip(&fd_reg)
        .map(|(c, r)| c + bank.cfg.lambda2 * r)
        .collect();
    let err_dir = max_rel_err(&g_dir, &fd_total);
    assert!(err_dir < 1e-3, "ACCEPT-3 FAIL: L_dir grad err {err_dir}");
    // isolate L_cont and L_reg analytically via the lambda2 knob
    let mut bank0 = DirectionBank::new(
        dim,
        DirectionsConfig {
            k: 2,
            d_f: 3,
            mlp1_hidden: 5,
            mlp2_hidden: 6,
            tau: 0.5,
            lambda2: 0.0,
            ..DirectionsConfig::default()
        },
        3005,
    )
    .unwrap();
    bank0.params = bank.params.clone();
    let (_, _, g0) = direction_loss_grad(&bank0, &codes, &alphas, true).unwrap();
    let g_cont = g0.unwrap();
    let err_cont = max_rel_err(&g_cont, &fd_cont);
    assert!(err_cont < 1e-3, "ACCEPT-3 FAIL: L_cont grad err {err_cont}");
    let g_reg: Vec<f64> = g_dir
        .iter()
        .zip(&g_cont)
        .map(|(t, c)| (t - c) / bank.cfg.lambda2)
        .collect();
    let err_reg = max_rel_err(&g_reg, &fd_reg);
    assert!(err_reg < 1e-3, "ACCEPT-3 FAIL: L_reg grad err {err_reg}");

    println!(
        "ACCEPT-3 PASS: grad rel errs: L_diffusion {err_diff:.2e}, L_cls {err_cls:.2e}, L_cont {err_cont:.2e}, L_reg {err_reg:.2e} (tol 1e-3)"
    );
}

// ---------------------------------------------------------------------------
// shared desk-scale pipeline for criteria 4 and 5
// ---------------------------------------------------------------------------

fn desk_config() -> ExperimentConfig {
    ExperimentConfig::with_seed(42)
}

fn desk_artifacts() -> &'static ArtifactPaths {
    static RUN: OnceLock<ArtifactPaths> = OnceLock::new();
    RUN.get_or_init(|| {
        let root = tmp_root().join("acceptance-desk");
        let paths = ArtifactPaths::new(&root);
        if root.join(".lock").exists() {
            let _ = std::fs::remove_file(root.join(".lock"));
        }
        if !paths.summary_file.exists() {
            run_all(&desk_config(), &paths).expect("desk-scale pipeline");
        }
        paths
    })
}

#[test]
fn criterion_4_reconstruction_quality_desk_scale() {
    let paths = desk_artifacts();
    let metrics = diffex_core::explain::MetricReport::from_text(
        &std::fs::read_to_string(&paths.metrics_file).expect("metrics file"),
    )
    .expect("metrics parse");
    assert!(
        metrics.ssim >= 0.85,
        "ACCEPT-4 FAIL: ssim {} < 0.85",
        metrics.ssim
    );
    assert!(metrics.mse <= 0.01, "ACCEPT-4 FAIL: mse {} > 0.01", metrics.mse);
    assert!(
        metrics.agreement >= 0.95,
        "ACCEPT-4 FAIL: agreement {} < 0.95",
        metrics.agreement
    );
    println!(
        "ACCEPT-4 PASS: ssim {:.4} (>=0.85), mse {:.5} (<=0.01), agreement {:.3} (>=0.95), n={}",
        metrics.ssim, metrics.mse, metrics.agreement, metrics.n_samples
    );
}

#[test]
fn criterion_5_phenotype_recovery() {
    let paths = desk_artifacts();
    let cfg = desk_config();
    let ranking = load_ranking_report(&paths.ranking_report).expect("ranking report");
    assert!(
        !ranking.outcome.selections.is_empty(),
        "ACCEPT-5 FAIL: ranking selected no directions"
    );
    let split = diffex_core::datagen::load_dataset(&paths.data_dir).expect("dataset");
    let (classifier, _) = load_classifier(&paths.classifier_ckpt, None).expect("classifier");
    let (encoder, denoiser, schedule, _) = load_sdae(&paths.sdae_ckpt, None).expect("sdae");
    let (bank, _) = load_directions(&paths.directions_ckpt, None).expect("bank");
    let models = PipelineModels {
        encoder: &encoder,
        denoiser: &denoiser,
        classifier: &classifier,
        schedule: &schedule,
        n_steps: cfg.sdae.n_steps,
    };
    // the 64-image pool the ranking used: class-0 test images, id order
    let pool: Vec<(usize, Pixels)> = split
        .test
        .iter()
        .filter(|im| (im.label as usize) != ranking.target_class)
        .take(cfg.ranking.pool_size)
        .map(|im| (im.id, im.pixels.clone()))
        .collect();
    assert_eq!(pool.len(), 64, "ACCEPT-5 FAIL: pool size {}", pool.len());

    let mut best: Option<(usize, i8, f64, f64)> = None;
    for sel in ranking.outcome.selections.iter().take(2) {
        // regenerate the shift for every pool image and check the pixel
        // witness moves toward the treated phenotype: cytoplasm mean down or
        // nucleus blob count down, judged against the reconstruction baseline
        let witness_hits: usize = pool
            .iter()
            .map(|(id, x)| {
                let r = diffex_core::explain::generate_counterfactual(
                    *id,
                    x,
                    &bank,
                    sel.direction,
                    sel.sign,
                    &[0.0, cfg.ranking.alpha_rank],
                    &models,
                )
                .expect("counterfactual");
                let base = &r.images[0];
                let shifted = &r.images[1];
                let cyto_down = cytoplasm_mean(shifted) < cytoplasm_mean(base);
                let blobs_down = nucleus_blob_count(shifted) < nucleus_blob_count(base);
                usize::from(cyto_down || blobs_down)
            })
            .sum();
        let frac = witness_hits as f64 / pool.len() as f64;
        let qualifies = frac >= 0.70 && sel.mean_delta > 0.2;
        if best.is_none_or(|(_, _, bf, _)| frac > bf) {
            best = Some((sel.direction, sel.sign, frac, sel.mean_delta));
        }
        if qualifies {
            println!(
                "ACCEPT-5 PASS: direction {} ({}) moves the phenotype witness on {:.0}% of the pool (>=70%), mean target-probability shift {:.3} (>0.2)",
                sel.direction,
                if sel.sign >= 0 { "positive" } else { "negative" },
                frac * 100.0,
                sel.mean_delta
            );
            return;
        }
    }
    let (d, s, f, m) = best.unwrap();
    panic!(
        "ACCEPT-5 FAIL: best of top-2 was direction {d} (sign {s}) with witness fraction {:.2} and mean delta {:.3}",
        f, m
    );
}

// ---------------------------------------------------------------------------
// further desk-scale contracts tied to the shared run
// ---------------------------------------------------------------------------

#[test]
fn desk_encoder_separates_classes() {
    let paths = desk_artifacts();
    let split = diffex_core::datagen::load_dataset(&paths.data_dir).expect("dataset");
    let (encoder, _, _, _) = load_sdae(&paths.sdae_ckpt, None).expect("sdae");
    let mut codes: Vec<(u8, Vec<f64>)> = Vec::new();
    for im in &split.test {
        codes.push((im.label, diffex_core::semantic_ae::encode(&encoder, &im.pixels)));
    }
    let cos = |a: &[f64], b: &[f64]| -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let (mut within, mut wn, mut between, mut bn) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            let c = cos(&codes[i].1, &codes[j].1);
            if codes[i].0 == codes[j].0 {
                within += c;
                wn += 1;
            } else {
                between += c;
                bn += 1;
            }
        }
    }
    let within = within / wn as f64;
    let between = between / bn as f64;
    assert!(
        within > between,
        "within-class cosine {within:.3} should exceed between-class {between:.3}"
    );
    println!("desk encoder: within-class cosine {within:.3} > between-class {between:.3}");
}

#[test]
fn desk_classifier_accuracy() {
    let paths = desk_artifacts();
    let (_, report) = load_classifier(&paths.classifier_ckpt, None).expect("classifier");
    let acc = report.test_accuracy.expect("test split");
    assert!(acc >= 0.98, "classifier test accuracy {acc} < 0.98");
    println!("desk classifier: test accuracy {acc}");
}

#[test]
fn desk_training_reports_improve_and_directions_decorrelate() {
    let paths = desk_artifacts();
    let (_, _, _, sdae_report) = load_sdae(&paths.sdae_ckpt, None).expect("sdae");
    let first = *sdae_report.total_losses.first().expect("loss history");
    let last = *sdae_report.total_losses.last().expect("loss history");
    assert!(last < first, "sdae loss did not improve: {first} -> {last}");
    let (_, dir_report) = load_directions(&paths.directions_ckpt, None).expect("bank");
    let dfirst = *dir_report.contrastive_losses.first().expect("history");
    let dlast = *dir_report.contrastive_losses.last().expect("history");
    assert!(dlast < dfirst, "contrastive loss did not improve: {dfirst} -> {dlast}");
    assert!(
        dir_report.mean_pairwise_abs_cosine <= 0.5,
        "mean pairwise |cosine| {} > 0.5",
        dir_report.mean_pairwise_abs_cosine
    );
    println!(
        "desk training: sdae {first:.4}->{last:.4}, contrastive {dfirst:.3}->{dlast:.3}, direction |cos| {:.3}",
        dir_report.mean_pairwise_abs_cosine
    );
}

#[test]
fn desk_counterfactual_contracts() {
    let paths = desk_artifacts();
    let cfg = desk_config();
    let split = diffex_core::datagen::load_dataset(&paths.data_dir).expect("dataset");
    let (classifier, _) = load_classifier(&paths.classifier_ckpt, None).expect("classifier");
    let (encoder, denoiser, schedule, _) = load_sdae(&paths.sdae_ckpt, None).expect("sdae");
    let (bank, _) = load_directions(&paths.directions_ckpt, None).expect("bank");
    let ranking = load_ranking_report(&paths.ranking_report).expect("ranking");
    let top = ranking
        .outcome
        .selections
        .first()
        .expect("at least one selection");
    let models = PipelineModels {
        encoder: &encoder,
        denoiser: &denoiser,
        classifier: &classifier,
        schedule: &schedule,
        n_steps: cfg.sdae.n_steps,
    };
    let sources: Vec<&diffex_core::datagen::LabeledImage> = split
        .test
        .iter()
        .filter(|im| (im.label as usize) != ranking.target_class)
        .take(16)
        .collect();
    let mut monotone = 0usize;
    for (i, im) in sources.iter().enumerate() {
        let r = diffex_core::explain::generate_counterfactual(
            im.id,
            &im.pixels,
            &bank,
            top.direction,
            top.sign,
            &[0.0, 1.0, 2.0, 3.0],
            &models,
        )
        .expect("counterfactual");
        // probability rows are simplex rows
        for trace in &r.prob_traces {
            let s: f64 = trace.iter().sum();
            assert!((s - 1.0).abs() < 1e-6 && trace.iter().all(|&p| p >= 0.0));
        }
        // the alpha = 0 entry is bitwise the plain reconstruction
        if i < 4 {
            let recon = diffex_core::semantic_ae::reconstruct(
                &im.pixels,
                &encoder,
                &denoiser,
                &classifier,
                &schedule,
                cfg.sdae.n_steps,
            )
            .expect("reconstruct");
            assert!(
                r.images[0]
                    .iter()
                    .zip(recon.iter())
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
                "alpha=0 tile differs from reconstruction"
            );
        }
        // monotone trend of the target probability over the sweep (small
        // dips inside saturation noise are tolerated)
        let p: Vec<f64> = r
            .prob_traces
            .iter()
            .map(|t| t[ranking.target_class])
            .collect();
        if p.windows(2).all(|w| w[1] >= w[0] - 0.01) {
            monotone += 1;
        }
    }
    let frac = monotone as f64 / sources.len() as f64;
    assert!(
        frac >= 0.6,
        "monotone trend on {frac:.2} of sources, need >= 0.6"
    );
    println!("desk counterfactuals: traces on simplex, alpha=0 bit-exact, monotone trend on {:.0}%", frac * 100.0);
}

// ---------------------------------------------------------------------------
// criterion 6: ranking algorithm on scripted stubs
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_ranking_algorithm_suite() {
    let cfg = RankingConfig {
        alpha_rank: 2.0,
        tau_rank: 0.1,
        per_image_delta: 0.5,
        n_max: 3,
        target_class: 1,
        pool_size: 8,
    };
    // greedy dominance + pool monotonicity on random matrices
    let mut rng = stream(6001, "c6");
    for _ in 0..30 {
        let k = 2 + (rng.gen::<f64>() * 3.0) as usize;
        let n = 3 + (rng.gen::<f64>() * 6.0) as usize;
        let candidates = candidate_order(k);
        let deltas = Array2::from_shape_fn((2 * k, n), |_| rng.gen::<f64>() * 1.2 - 0.4);
        let ids: Vec<usize> = (0..n).collect();
        let out = greedy_rank(&candidates, &deltas, &ids, &cfg);
        if let Some(first) = out.selections.first() {
            let exhaustive = (0..2 * k)
                .map(|ci| deltas.row(ci).mean().unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(
                (first.mean_delta - exhaustive).abs() < 1e-12,
                "ACCEPT-6 FAIL: greedy first not dominant"
            );
        }
        let mut seen = std::collections::HashSet::new();
        for sel in &out.selections {
            for id in &sel.explained_ids {
                assert!(seen.insert(*id), "ACCEPT-6 FAIL: explained ids overlap");
            }
        }
        for w in out.pool_trace.windows(2) {
            assert!(
                w[1].pool_before <= w[0].pool_before - w[0].removed,
                "ACCEPT-6 FAIL: pool did not shrink monotonically"
            );
        }
    }
    // deterministic tie-break
    let candidates = candidate_order(2);
    let mut deltas = Array2::zeros((4, 2));
    for i in 0..2 {
        deltas[[1, i]] = 0.5; // (0,-)
        deltas[[2, i]] = 0.5; // (1,+)
    }
    let out = greedy_rank(&candidates, &deltas, &[0, 1], &cfg);
    assert_eq!(
        (out.selections[0].direction, out.selections[0].sign),
        (0, -1),
        "ACCEPT-6 FAIL: tie-break"
    );
    // empty pool and all-below-threshold
    let empty = greedy_rank(&candidates, &Array2::zeros((4, 0)), &[], &cfg);
    assert!(empty.selections.is_empty(), "ACCEPT-6 FAIL: empty pool");
    let low = greedy_rank(&candidates, &Array2::from_elem((4, 3), 0.05), &[0, 1, 2], &cfg);
    assert!(low.selections.is_empty(), "ACCEPT-6 FAIL: threshold");
    println!("ACCEPT-6 PASS: greedy dominance, pool monotonicity, tie-break, empty-pool, below-threshold");
}

// ---------------------------------------------------------------------------
// criterion 7: KID estimator
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_kid_estimator_suite() {
    let d = 16;
    let sample = |n: usize, shift: f64, seed: u64| -> Array2<f64> {
        let mut rng = stream(seed, "c7");
        let mut m = Array2::zeros((n, d));
        fill_standard_normal(m.as_slice_mut().unwrap(), &mut rng);
        m.mapv_inplace(|v| v + shift);
        m
    };
    let a = sample(500, 0.0, 7001);
    let b = sample(500, 0.0, 7002);
    let equal = kid(a.view(), b.view()).unwrap();
    assert!(equal.abs() <= 0.01, "ACCEPT-7 FAIL: equal-dist kid {equal}");
    let c = sample(500, 1.0 / (d as f64).sqrt(), 7003);
    let shifted = kid(a.view(), c.view()).unwrap();
    assert!(
        shifted > equal,
        "ACCEPT-7 FAIL: shifted kid {shifted} <= equal {equal}"
    );
    // O(n^2) oracle equivalence at n = 100
    let x = sample(100, 0.0, 7004);
    let y = sample(80, 0.2, 7005);
    let mine = kid(x.view(), y.view()).unwrap();
    let kernel = |p: ndarray::ArrayView1<f64>, q: ndarray::ArrayView1<f64>| -> f64 {
        let dot: f64 = p.iter().zip(q.iter()).map(|(a, b)| a * b).sum();
        (dot / d as f64 + 1.0).powi(3)
    };
    let (n, m) = (x.nrows(), y.nrows());
    let mut s_xx = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s_xx += kernel(x.row(i), x.row(j));
            }
        }
    }
    let mut s_yy = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                s_yy += kernel(y.row(i), y.row(j));
            }
        }
    }
    let mut s_xy = 0.0;
    for i in 0..n {
        for j in 0..m {
            s_xy += kernel(x.row(i), y.row(j));
        }
    }
    let oracle =
        s_xx / (n * (n - 1)) as f64 + s_yy / (m * (m - 1)) as f64 - 2.0 * s_xy / (n * m) as f64;
    let gap = (mine - oracle).abs();
    assert!(gap < 1e-6, "ACCEPT-7 FAIL: oracle gap {gap}");
    println!(
        "ACCEPT-7 PASS: equal-dist kid {equal:.5} (| |<=0.01), shifted {shifted:.5} (> equal), oracle gap {gap:.2e}"
    );
}

// ---------------------------------------------------------------------------
// criterion 8: end-to-end determinism
// ---------------------------------------------------------------------------

fn determinism_config() -> ExperimentConfig {
    // reduced sizes: determinism is a property of the code paths, not the
    // model quality, and the full path (all eight stages) runs either way
    let mut cfg = ExperimentConfig::with_seed(7);
    cfg.datagen.n_images = 48;
    cfg.datagen.side = 32;
    cfg.classifier.epochs = 2;
    cfg.classifier.channels = [4, 8, 16];
    cfg.sdae.t_max = 60;
    cfg.sdae.epochs = 2;
    cfg.sdae.batch_size = 8;
    cfg.sdae.n_steps = 6;
    cfg.sdae.d_z = 8;
    cfg.sdae.emb_dim = 8;
    cfg.sdae.denoiser_channels = [4, 6, 8, 12];
    cfg.sdae.encoder_channels = [4, 4, 8];
    cfg.directions.k = 3;
    cfg.directions.d_f = 8;
    cfg.directions.mlp1_hidden = 8;
    cfg.directions.mlp2_hidden = 8;
    cfg.directions.epochs = 3;
    cfg.directions.batch_size = 8;
    cfg.ranking.pool_size = 4;
    cfg.ranking.n_max = 2;
    cfg.ranking.tau_rank = 0.01;
    cfg.explain.grid_images = 2;
    cfg.explain.metric_samples = 3;
    cfg.explain.alphas = vec![0.0, 2.0];
    cfg
}

#[test]
fn criterion_8_end_to_end_determinism() {
    let cfg = determinism_config();
    let root_a = tmp_root().join("accept-det-a");
    let root_b = tmp_root().join("accept-det-b");
    for root in [&root_a, &root_b] {
        if root.exists() {
            std::fs::remove_dir_all(root).expect("clean determinism dir");
        }
        run_all(&cfg, &ArtifactPaths::new(root)).expect("determinism run");
    }
    let mut compared = 0;
    for rel in [
        "ranking.json",
        "metrics.txt",
        "summary.txt",
        "classifier.ckpt",
        "sdae.ckpt",
        "directions.ckpt",
    ] {
        let a = std::fs::read(root_a.join(rel)).expect(rel);
        let b = std::fs::read(root_b.join(rel)).expect(rel);
        assert_eq!(a, b, "ACCEPT-8 FAIL: {rel} differs between runs");
        compared += 1;
    }
    // grids too
    let mut grid_files: Vec<_> = std::fs::read_dir(root_a.join("grids"))
        .expect("grids dir")
        .filter_map(|e| e.ok())
        .map(|e| e.file_name())
        .collect();
    grid_files.sort();
    for name in grid_files {
        let a = std::fs::read(root_a.join("grids").join(&name)).expect("grid a");
        let b = std::fs::read(root_b.join("grids").join(&name)).expect("grid b");
        assert_eq!(a, b, "ACCEPT-8 FAIL: grid {name:?} differs");
        compared += 1;
    }
    // atomic-write contract: nothing was left under a temp name
    for root in [&root_a, &root_b] {
        let mut stack = vec![root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir).expect("walk artifacts") {
                let entry = entry.expect("entry");
                let path = entry.path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    assert!(
                        path.extension().is_none_or(|e| e != "tmp"),
                        "ACCEPT-8 FAIL: stray temp file {path:?}"
                    );
                }
            }
        }
    }
    println!("ACCEPT-8 PASS: {compared} artifacts byte-identical across two runs, no stray temp files");
}

#[test]
fn summary_numbers_match_underlying_artifacts_exactly() {
    // reuse the determinism artifacts; rerun if that test has not run yet
    let cfg = determinism_config();
    let root = tmp_root().join("accept-summary");
    if root.exists() {
        std::fs::remove_dir_all(&root).expect("clean");
    }
    let paths = ArtifactPaths::new(&root);
    run_all(&cfg, &paths).expect("pipeline");
    let summary = std::fs::read_to_string(&paths.summary_file).expect("summary");
    // reconstruction line carries the shortest round-trip rendering of the
    // exact values in metrics.txt
    let metrics = diffex_core::explain::MetricReport::from_text(
        &std::fs::read_to_string(&paths.metrics_file).expect("metrics"),
    )
    .expect("metrics parse");
    let expected = format!(
        "reconstruction: ssim {} mse {} perceptual {} kid {} agreement {} (n={})",
        metrics.ssim, metrics.mse, metrics.perceptual, metrics.kid, metrics.agreement, metrics.n_samples
    );
    assert!(
        summary.contains(&expected),
        "summary line missing or diverged:\nwant: {expected}\nsummary:\n{summary}"
    );
    // classifier accuracy matches the checkpoint report
    let (_, report) = load_classifier(&paths.classifier_ckpt, None).expect("classifier");
    let acc_line = format!("test accuracy: {}", report.test_accuracy.expect("test split"));
    assert!(summary.contains(&acc_line), "summary accuracy diverged");
    // ranking selections match the ranking report
    let ranking = load_ranking_report(&paths.ranking_report).expect("ranking");
    for sel in &ranking.outcome.selections {
        let frag = format!("mean delta {}", sel.mean_delta);
        assert!(summary.contains(&frag), "summary missing ranking line {frag}");
    }
    println!("summary cross-parse: metrics, accuracy and ranking lines match artifacts exactly");
}
