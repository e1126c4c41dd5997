// scratch probe: replicate the sdae training loop with periodic quality
// evals and per-checkpoint snapshots (removed before ship)
use diffex_core::classifier::ClassifierModel;
use diffex_core::config::{parse_config, Stage};
use diffex_core::datagen::DatasetSplit;
use diffex_core::denoiser::Denoiser;
use diffex_core::diffusion::make_schedule;
use diffex_core::nn::adam::clip_global_norm;
use diffex_core::nn::{chunked_batch_grad, Adam};
use diffex_core::pipeline::*;
use diffex_core::ranking::PipelineModels;
use diffex_core::rng::{derive_seed, stream_from};
use diffex_core::semantic_ae::{draw_noise, NoiseDraw, SdaeReport, SdaeTrainer, SemanticEncoder};
use rand::Rng;

fn eval_recon(
    split: &DatasetSplit,
    enc: &SemanticEncoder,
    den: &Denoiser,
    clf: &ClassifierModel,
    sched: &diffex_core::diffusion::NoiseSchedule,
    n_steps: usize,
    n: usize,
) -> (f64, f64, f64) {
    let imgs: Vec<_> = split.test.iter().take(n).map(|im| im.pixels.clone()).collect();
    let models = PipelineModels {
        encoder: enc,
        denoiser: den,
        classifier: clf,
        schedule: sched,
        n_steps,
    };
    let m = diffex_core::explain::reconstruction_metrics(&imgs, &models).unwrap();
    (m.ssim, m.mse, m.agreement)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg = parse_config(std::path::Path::new(&args[1])).unwrap();
    let root = std::path::PathBuf::from(&args[2]);
    let paths = ArtifactPaths::new(&root);
    std::fs::create_dir_all(&root).unwrap();

    if !paths.data_dir.join("manifest.jsonl").exists() {
        eprintln!("generating data...");
        run_stage(Stage::Datagen, &cfg, &paths).unwrap();
    }
    if !paths.classifier_ckpt.exists() {
        eprintln!("training classifier...");
        run_stage(Stage::TrainClassifier, &cfg, &paths).unwrap();
    }
    let split = diffex_core::datagen::load_dataset(&paths.data_dir).unwrap();
    let (clf, crep) = load_classifier(&paths.classifier_ckpt, None).unwrap();
    eprintln!("classifier test acc {:?}", crep.test_accuracy);

    let seed = derive_seed(cfg.seed, "stage/sdae");
    let sched = make_schedule(cfg.sdae.t_max, cfg.sdae.beta_start, cfg.sdae.beta_end).unwrap();
    let trainer = SdaeTrainer::new(&cfg.sdae);
    let mut params = trainer.init_params(derive_seed(seed, "sdae/init"));
    let mut ema = (cfg.sdae.ema_decay > 0.0).then(|| params.clone());
    let mut ema_steps = 0u64;
    let mut opt = Adam::new(params.len(), cfg.sdae.lr);
    let mut shuffle_rng = stream_from(derive_seed(seed, "sdae/shuffle"));
    let mut noise_rng = stream_from(derive_seed(seed, "sdae/noise"));
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let shape = split.train[0].pixels.dim();
    let max_epochs = cfg.sdae.epochs;

    let decay_epoch = (max_epochs * 7).div_ceil(10);
    for epoch in 0..max_epochs {
        if epoch == decay_epoch && cfg.sdae.lr_decay != 1.0 {
            opt.lr *= cfg.sdae.lr_decay;
        }
        let t0 = std::time::Instant::now();
        for i in (1..order.len()).rev() {
            let j = (shuffle_rng.gen::<f64>() * (i + 1) as f64).floor() as usize;
            order.swap(i, j.min(i));
        }
        let (mut ep_diff, mut ep_cls, mut n_seen) = (0.0, 0.0, 0usize);
        for batch_idx in order.chunks(cfg.sdae.batch_size) {
            let items: Vec<(&diffex_core::imageio::Pixels, NoiseDraw)> = batch_idx
                .iter()
                .map(|&i| {
                    (
                        &split.train[i].pixels,
                        draw_noise(&mut noise_rng, cfg.sdae.t_max, shape),
                    )
                })
                .collect();
            let scale = 1.0 / items.len() as f64;
            let cell = std::sync::Mutex::new((0.0f64, 0.0f64));
            let (mut grads, _) = chunked_batch_grad(&items, 8, params.len(), |_, (x, draw), g| {
                let l = trainer.sample_loss_grad(&params, &clf, &sched, x, draw, scale, Some(g));
                let mut acc = cell.lock().unwrap();
                acc.0 += l.diffusion;
                acc.1 += l.cls;
                0.0
            });
            let (d, c) = cell.into_inner().unwrap();
            if cfg.sdae.grad_clip > 0.0 {
                clip_global_norm(&mut grads, cfg.sdae.grad_clip);
            }
            opt.step(&mut params, &grads);
            if let Some(ema) = ema.as_mut() {
                ema_steps += 1;
                let dd = cfg
                    .sdae
                    .ema_decay
                    .min((1 + ema_steps) as f64 / (10 + ema_steps) as f64);
                for (e, &p) in ema.iter_mut().zip(params.iter()) {
                    *e = dd * *e + (1.0 - dd) * p;
                }
            }
            ep_diff += d;
            ep_cls += c;
            n_seen += items.len();
        }
        let ep = epoch + 1;
        eprintln!(
            "epoch {ep}: diff {:.4} cls {:.4} ({:.0}s)",
            ep_diff / n_seen as f64,
            ep_cls / n_seen as f64,
            t0.elapsed().as_secs_f64()
        );
        if ep % 5 == 0 || ep == max_epochs {
            let snapshot = ema.as_ref().unwrap_or(&params);
            let (p_enc, p_den) = snapshot.split_at(trainer.n_enc);
            let enc = SemanticEncoder {
                net: diffex_core::semantic_ae::EncoderNet::new(cfg.sdae.encoder_channels, cfg.sdae.d_z),
                params: p_enc.to_vec(),
                d_z: cfg.sdae.d_z,
            };
            let den = Denoiser {
                net: diffex_core::denoiser::DenoiserNet::new(diffex_core::denoiser::DenoiserConfig {
                    channels: cfg.sdae.denoiser_channels,
                    emb_dim: cfg.sdae.emb_dim,
                    cond_dim: cfg.sdae.d_z + 2,
                    in_channels: 3,
                }),
                params: p_den.to_vec(),
            };
            let (ssim, mse, agree) = eval_recon(&split, &enc, &den, &clf, &sched, cfg.sdae.n_steps, 12);
            let _ = &ssim;
            eprintln!("  eval @{ep}: ssim {ssim:.4} mse {mse:.5} agreement {agree:.3}");
            // snapshot with a config stamped to this epoch count so later CLI
            // stages can consume it
            let mut cfg_n = cfg.clone();
            cfg_n.sdae.epochs = ep;
            let report = SdaeReport {
                diffusion_losses: vec![ep_diff / n_seen as f64],
                cls_losses: vec![ep_cls / n_seen as f64],
                total_losses: vec![],
                seed,
                config_hash: String::new(),
            };
            save_sdae(&root.join(format!("sdae_e{ep}.ckpt")), &cfg_n, &enc, &den, &report).unwrap();
            std::fs::write(
                root.join(format!("config_e{ep}.toml")),
                cfg_n.to_toml_string(),
            )
            .unwrap();
        }
    }
    eprintln!("done");
}
