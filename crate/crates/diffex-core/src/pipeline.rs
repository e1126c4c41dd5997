//! Stage orchestration over an artifact directory.
//!
//! Each stage checks that its upstream artifacts exist and were produced
//! under a compatible config (via the cumulative stage hash), computes,
//! writes outputs atomically, and appends one record to the run manifest.
//! A lock file gives one run exclusive ownership of the directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    atomic_write, read_checkpoint, write_checkpoint, CheckpointHeader, PayloadReader,
    PayloadWriter,
};
use crate::classifier::{train_classifier, ClassifierModel, ClassifierNet, TrainReport};
use crate::config::{stage_hash, ExperimentConfig, Stage};
use crate::datagen::{generate_dataset, load_dataset, write_dataset, DatasetSplit};
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserNet};
use crate::diffusion::{make_schedule, NoiseSchedule};
use crate::directions::{
    precompute_codes, train_directions, DirectionBank, DirectionReport,
};
use crate::error::{Error, Result};
use crate::explain::{generate_counterfactual, reconstruction_metrics, MetricReport};
use crate::imageio::Pixels;
use crate::ranking::{rank_directions, PipelineModels, RankingOutcome};
use crate::rng::{derive_seed, fnv1a64};
use crate::semantic_ae::{train_semantic_ae, SdaeReport, SemanticEncoder};

/// Canonical artifact layout; every path can be overridden by CLI flags.
#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    pub root: PathBuf,
    pub data_dir: PathBuf,
    pub classifier_ckpt: PathBuf,
    pub sdae_ckpt: PathBuf,
    pub directions_ckpt: PathBuf,
    pub ranking_report: PathBuf,
    pub metrics_file: PathBuf,
    pub grids_dir: PathBuf,
    pub summary_file: PathBuf,
}

impl ArtifactPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        ArtifactPaths {
            data_dir: root.join("data"),
            classifier_ckpt: root.join("classifier.ckpt"),
            sdae_ckpt: root.join("sdae.ckpt"),
            directions_ckpt: root.join("directions.ckpt"),
            ranking_report: root.join("ranking.json"),
            metrics_file: root.join("metrics.txt"),
            grids_dir: root.join("grids"),
            summary_file: root.join("summary.txt"),
            root,
        }
    }

    fn lock_file(&self) -> PathBuf {
        self.root.join(".lock")
    }

    fn run_manifest(&self) -> PathBuf {
        self.root.join("run_manifest.jsonl")
    }

    fn config_echo(&self) -> PathBuf {
        self.root.join("config.used.toml")
    }
}

/// Exclusive ownership of an artifact directory; the lock file is removed on
/// drop.
pub struct PipelineLock {
    path: PathBuf,
}

impl Drop for PipelineLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn acquire_lock(paths: &ArtifactPaths) -> Result<PipelineLock> {
    std::fs::create_dir_all(&paths.root)
        .map_err(|e| Error::io(paths.root.display().to_string(), e))?;
    let lock = paths.lock_file();
    match std::fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&lock)
    {
        Ok(_) => Ok(PipelineLock { path: lock }),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::io(
            lock.display().to_string(),
            std::io::Error::other(
                "artifact directory is owned by another run (remove .lock if stale)",
            ),
        )),
        Err(e) => Err(Error::io(lock.display().to_string(), e)),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHash {
    path: String,
    fnv64: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunRecord {
    stage: String,
    seed: u64,
    duration_ms: u128,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

fn hash_file(root: &Path, path: &Path) -> FileHash {
    let bytes = std::fs::read(path).unwrap_or_default();
    let rel = path
        .strip_prefix(root)
        .map(|p| p.display().to_string())
        .unwrap_or_else(|_| path.display().to_string());
    FileHash {
        path: rel,
        fnv64: format!("{:016x}", fnv1a64(&bytes)),
    }
}

fn append_manifest(paths: &ArtifactPaths, record: &RunRecord) -> Result<()> {
    use std::io::Write;
    let path = paths.run_manifest();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(
        f,
        "{}",
        serde_json::to_string(record).expect("record serializes")
    )
    .map_err(|e| Error::io(path.display().to_string(), e))
}

fn require(path: &Path, missing_stage: Stage) -> Result<()> {
    if !path.exists() {
        return Err(Error::Dependency(missing_stage.name().to_string()));
    }
    Ok(())
}

// --- checkpoint payload codecs -------------------------------------------

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    config: crate::classifier::ClassifierConfig,
    report: TrainReport,
}

pub fn save_classifier(
    path: &Path,
    cfg: &ExperimentConfig,
    model: &ClassifierModel,
    report: &TrainReport,
) -> Result<()> {
    let mut pw = PayloadWriter::new();
    pw.put_json(&ClassifierMeta {
        config: model.config.clone(),
        report: report.clone(),
    });
    pw.put_f64s(model.params());
    let header = CheckpointHeader::new(
        Stage::TrainClassifier.name(),
        stage_hash(cfg, Stage::TrainClassifier),
        cfg.seed,
    );
    write_checkpoint(path, &header, &pw.finish())
}

pub fn load_classifier(
    path: &Path,
    expected_hash: Option<&str>,
) -> Result<(ClassifierModel, TrainReport)> {
    let (_, payload) = read_checkpoint(path, Stage::TrainClassifier.name(), None)?;
    let mut pr = PayloadReader::new(&payload);
    let meta: ClassifierMeta = pr.get_json()?;
    let params = pr.get_f64s()?;
    if let Some(h) = expected_hash {
        let (hdr, _) = read_checkpoint(path, Stage::TrainClassifier.name(), None)?;
        if hdr.config_hash != h {
            return Err(Error::Dependency(format!(
                "{} (checkpoint built from an incompatible config; re-run it)",
                Stage::TrainClassifier.name()
            )));
        }
    }
    let net = ClassifierNet::new(meta.config.channels);
    if params.len() != net.n_params() {
        return Err(Error::Checkpoint(format!(
            "classifier parameter count {} does not match architecture {}",
            params.len(),
            net.n_params()
        )));
    }
    Ok((
        ClassifierModel::from_parts(net, params, meta.config),
        meta.report,
    ))
}

#[derive(Serialize, Deserialize)]
struct SdaeMeta {
    config: crate::semantic_ae::SdaeConfig,
    report: SdaeReport,
}

pub fn save_sdae(
    path: &Path,
    cfg: &ExperimentConfig,
    encoder: &SemanticEncoder,
    denoiser: &Denoiser,
    report: &SdaeReport,
) -> Result<()> {
    let mut pw = PayloadWriter::new();
    pw.put_json(&SdaeMeta {
        config: cfg.sdae.clone(),
        report: report.clone(),
    });
    pw.put_f64s(&encoder.params);
    pw.put_f64s(&denoiser.params);
    let header = CheckpointHeader::new(
        Stage::TrainSdae.name(),
        stage_hash(cfg, Stage::TrainSdae),
        cfg.seed,
    );
    write_checkpoint(path, &header, &pw.finish())
}

pub fn load_sdae(
    path: &Path,
    expected_hash: Option<&str>,
) -> Result<(SemanticEncoder, Denoiser, NoiseSchedule, SdaeReport)> {
    let (hdr, payload) = read_checkpoint(path, Stage::TrainSdae.name(), None)?;
    if let Some(h) = expected_hash {
        if hdr.config_hash != h {
            return Err(Error::Dependency(format!(
                "{} (checkpoint built from an incompatible config; re-run it)",
                Stage::TrainSdae.name()
            )));
        }
    }
    let mut pr = PayloadReader::new(&payload);
    let meta: SdaeMeta = pr.get_json()?;
    let enc_params = pr.get_f64s()?;
    let den_params = pr.get_f64s()?;
    let s = &meta.config;
    let enc_net = crate::semantic_ae::EncoderNet::new(s.encoder_channels, s.d_z);
    let den_net = DenoiserNet::new(DenoiserConfig {
        channels: s.denoiser_channels,
        emb_dim: s.emb_dim,
        cond_dim: s.d_z + crate::classifier::N_CLASSES,
        in_channels: 3,
    });
    if enc_params.len() != enc_net.n_params() || den_params.len() != den_net.n_params() {
        return Err(Error::Checkpoint(
            "semantic-ae parameter counts do not match architecture".into(),
        ));
    }
    let schedule = make_schedule(s.t_max, s.beta_start, s.beta_end)?;
    Ok((
        SemanticEncoder {
            d_z: s.d_z,
            net: enc_net,
            params: enc_params,
        },
        Denoiser {
            net: den_net,
            params: den_params,
        },
        schedule,
        meta.report,
    ))
}

#[derive(Serialize, Deserialize)]
struct DirectionsMeta {
    config: crate::directions::DirectionsConfig,
    code_dim: usize,
    report: DirectionReport,
}

pub fn save_directions(
    path: &Path,
    cfg: &ExperimentConfig,
    bank: &DirectionBank,
    report: &DirectionReport,
) -> Result<()> {
    let mut pw = PayloadWriter::new();
    pw.put_json(&DirectionsMeta {
        config: bank.cfg.clone(),
        code_dim: bank.code_dim,
        report: report.clone(),
    });
    pw.put_f64s(&bank.params);
    let header = CheckpointHeader::new(
        Stage::Discover.name(),
        stage_hash(cfg, Stage::Discover),
        cfg.seed,
    );
    write_checkpoint(path, &header, &pw.finish())
}

pub fn load_directions(
    path: &Path,
    expected_hash: Option<&str>,
) -> Result<(DirectionBank, DirectionReport)> {
    let (hdr, payload) = read_checkpoint(path, Stage::Discover.name(), None)?;
    if let Some(h) = expected_hash {
        if hdr.config_hash != h {
            return Err(Error::Dependency(format!(
                "{} (checkpoint built from an incompatible config; re-run it)",
                Stage::Discover.name()
            )));
        }
    }
    let mut pr = PayloadReader::new(&payload);
    let meta: DirectionsMeta = pr.get_json()?;
    let params = pr.get_f64s()?;
    let mut bank = DirectionBank::new(meta.code_dim, meta.config, 0)?;
    if params.len() != bank.n_params() {
        return Err(Error::Checkpoint(
            "direction bank parameter count does not match architecture".into(),
        ));
    }
    bank.params = params;
    Ok((bank, meta.report))
}

/// Stored ranking report file.
#[derive(Debug, Serialize, Deserialize)]
pub struct RankingReportFile {
    pub schema_version: u32,
    pub config_hash: String,
    pub target_class: usize,
    pub alpha_rank: f64,
    pub tau_rank: f64,
    pub per_image_delta: f64,
    pub pool_ids: Vec<usize>,
    pub outcome: RankingOutcome,
}

// --- stage bodies ----------------------------------------------------------

fn load_data(paths: &ArtifactPaths) -> Result<DatasetSplit> {
    require(&paths.data_dir.join("manifest.jsonl"), Stage::Datagen)?;
    load_dataset(&paths.data_dir)
}

fn stage_datagen(cfg: &ExperimentConfig, paths: &ArtifactPaths) -> Result<Vec<PathBuf>> {
    let split = generate_dataset(&cfg.datagen, derive_seed(cfg.seed, "stage/datagen"))?;
    write_dataset(&split, &paths.data_dir)?;
    Ok(vec![paths.data_dir.join("manifest.jsonl")])
}

fn stage_train_classifier(cfg: &ExperimentConfig, paths: &ArtifactPaths) -> Result<Vec<PathBuf>> {
    let split = load_data(paths)?;
    let (model, report) = train_classifier(
        &split,
        &cfg.classifier,
        derive_seed(cfg.seed, "stage/classifier"),
    )?;
    save_classifier(&paths.classifier_ckpt, cfg, &model, &report)?;
    Ok(vec![paths.classifier_ckpt.clone()])
}

fn stage_train_sdae(cfg: &ExperimentConfig, paths: &ArtifactPaths) -> Result<Vec<PathBuf>> {
    let split = load_data(paths)?;
    require(&paths.classifier_ckpt, Stage::TrainClassifier)?;
    let (classifier, _) = load_classifier(
        &paths.classifier_ckpt,
        Some(&stage_hash(cfg, Stage::TrainClassifier)),
    )?;
    let (encoder, denoiser, report) = train_semantic_ae(
        &split,
        &classifier,
        &cfg.sdae,
        derive_seed(cfg.seed, "stage/sdae"),
    )?;
    save_sdae(&paths.sdae_ckpt, cfg, &encoder, &denoiser, &report)?;
    Ok(vec![paths.sdae_ckpt.clone()])
}

fn stage_discover(cfg: &ExperimentConfig, paths: &ArtifactPaths) -> Result<Vec<PathBuf>> {
    let split = load_data(paths)?;
    require(&paths.classifier_ckpt, Stage::TrainClassifier)?;
    require(&paths.sdae_ckpt, Stage::TrainSdae)?;
    let (classifier, _) = load_classifier(
        &paths.classifier_ckpt,
        Some(&stage_hash(cfg, Stage::TrainClassifier)),
    )?;
    let (encoder, _denoiser, _schedule, _) =
        load_sdae(&paths.sdae_ckpt, Some(&stage_hash(cfg, Stage::TrainSdae)))?;
    let clf_sum = classifier.checksum();
    let enc_sum = encoder.checksum();
    let images: Vec<Pixels> = split.train.iter().map(|im| im.pixels.clone()).collect();
    let codes = precompute_codes(&encoder, &classifier, &images)?;
    let bank = DirectionBank::new(
        cfg.sdae.d_z + crate::classifier::N_CLASSES,
        cfg.directions.clone(),
        derive_seed(cfg.seed, "stage/directions-init"),
    )?;
    let (bank, report) = train_directions(bank, &codes, derive_seed(cfg.seed, "stage/directions"))?;
    if classifier.checksum() != clf_sum || encoder.checksum() != enc_sum {
        return Err(Error::Training(
            "frozen models changed during direction discovery".into(),
        ));
    }
    save_directions(&paths.directions_ckpt, cfg, &bank, &report)?;
    Ok(vec![paths.directions_ckpt.clone()])
}

/// Test-split images of the class opposite the ranking target, id order.
fn ranking_pool(split: &DatasetSplit, target_class: usize, pool_size: usize) -> Vec<(usize, Pixels)> {
    split
        .test
        .iter()
        .filter(|im| im.label as usize != target_class)
        .take(pool_size)
        .map(|im| (im.id, im.pixels.clone()))
        .collect()
}

fn stage_rank(cfg: &ExperimentConfig, paths: &ArtifactPaths) -> Result<Vec<PathBuf>> {
    let split = load_data(paths)?;
    require(&paths.classifier_ckpt, Stage::TrainClassifier)?;
    require(&paths.sdae_ckpt, Stage::TrainSdae)?;
    require(&paths.directions_ckpt, Stage::Discover)?;
    let (classifier, _) = load_classifier(
        &paths.classifier_ckpt,
        Some(&stage_hash(cfg, Stage::TrainClassifier)),
    )?;
    let (encoder, denoiser, schedule, _) =
        load_sdae(&paths.sdae_ckpt, Some(&stage_hash(cfg, Stage::TrainSdae)))?;
    let (bank, _) = load_directions(
        &paths.directions_ckpt,
        Some(&stage_hash(cfg, Stage::Discover)),
    )?;
    let pool = ranking_pool(&split, cfg.ranking.target_class, cfg.ranking.pool_size);
    let models = PipelineModels {
        encoder: &encoder,
        denoiser: &denoiser,
        classifier: &classifier,
        schedule: &schedule,
        n_steps: cfg.sdae.n_steps,
    };
    let outcome = rank_directions(&bank, &pool, &models, &cfg.ranking)?;
    let file = RankingReportFile {
        schema_version: crate::config::SCHEMA_VERSION,
        config_hash: stage_hash(cfg, Stage::Rank),
        target_class: cfg.ranking.target_class,
        alpha_rank: cfg.ranking.alpha_rank,
        tau_rank: cfg.ranking.tau_rank,
        per_image_delta: cfg.ranking.per_image_delta,
        pool_ids: pool.iter().map(|(id, _)| *id).collect(),
        outcome,
    };
    atomic_write(
        &paths.ranking_report,
        serde_json::to_string_pretty(&file)
            .expect("ranking report serializes")
            .as_bytes(),
    )?;
    Ok(vec![paths.ranking_report.clone()])
}

pub fn load_ranking_report(path: &Path) -> Result<RankingReportFile> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("bad ranking report: {e}")))
}

fn stage_explain(cfg: &ExperimentConfig, paths: &ArtifactPaths) -> Result<Vec<PathBuf>> {
    let split = load_data(paths)?;
    require(&paths.classifier_ckpt, Stage::TrainClassifier)?;
    require(&paths.sdae_ckpt, Stage::TrainSdae)?;
    require(&paths.directions_ckpt, Stage::Discover)?;
    require(&paths.ranking_report, Stage::Rank)?;
    let (classifier, _) = load_classifier(
        &paths.classifier_ckpt,
        Some(&stage_hash(cfg, Stage::TrainClassifier)),
    )?;
    let (encoder, denoiser, schedule, _) =
        load_sdae(&paths.sdae_ckpt, Some(&stage_hash(cfg, Stage::TrainSdae)))?;
    let (bank, _) = load_directions(
        &paths.directions_ckpt,
        Some(&stage_hash(cfg, Stage::Discover)),
    )?;
    let ranking = load_ranking_report(&paths.ranking_report)?;
    std::fs::create_dir_all(&paths.grids_dir)
        .map_err(|e| Error::io(paths.grids_dir.display().to_string(), e))?;
    let models = PipelineModels {
        encoder: &encoder,
        denoiser: &denoiser,
        classifier: &classifier,
        schedule: &schedule,
        n_steps: cfg.sdae.n_steps,
    };
    let sources: Vec<(usize, Pixels)> = split
        .test
        .iter()
        .filter(|im| im.label as usize != ranking.target_class)
        .take(cfg.explain.grid_images)
        .map(|im| (im.id, im.pixels.clone()))
        .collect();
    if sources.is_empty() {
        return Err(Error::Input(
            "no test images of the source class available for grids".into(),
        ));
    }
    let mut outputs = Vec::new();
    let mut grid_names = Vec::new();
    for (si, sel) in ranking.outcome.selections.iter().enumerate() {
        let results: Vec<crate::explain::CounterfactualResult> = crate::nn::ordered_par_map(
            &sources,
            |_, (id, x)| {
                generate_counterfactual(*id, x, &bank, sel.direction, sel.sign, &cfg.explain.alphas, &models)
            },
        )
        .into_iter()
        .collect::<Result<_>>()?;
        let sign_tag = if sel.sign >= 0 { "p" } else { "n" };
        let name = format!("grid{si}_d{}{}.png", sel.direction, sign_tag);
        let grid_path = paths.grids_dir.join(&name);
        crate::explain::emit_grid(&results, ranking.target_class, &grid_path)?;
        outputs.push(grid_path.clone());
        outputs.push(grid_path.with_extension("json"));
        grid_names.push(name);
    }
    // index marker: distinguishes "ran with zero selections" from "never ran"
    let index_path = paths.grids_dir.join("index.json");
    atomic_write(
        &index_path,
        serde_json::to_string_pretty(&serde_json::json!({
            "schema_version": crate::config::SCHEMA_VERSION,
            "grids": grid_names,
        }))
        .expect("index serializes")
        .as_bytes(),
    )?;
    outputs.push(index_path);
    Ok(outputs)
}

fn stage_metrics(cfg: &ExperimentConfig, paths: &ArtifactPaths) -> Result<Vec<PathBuf>> {
    let split = load_data(paths)?;
    require(&paths.classifier_ckpt, Stage::TrainClassifier)?;
    require(&paths.sdae_ckpt, Stage::TrainSdae)?;
    let (classifier, _) = load_classifier(
        &paths.classifier_ckpt,
        Some(&stage_hash(cfg, Stage::TrainClassifier)),
    )?;
    let (encoder, denoiser, schedule, _) =
        load_sdae(&paths.sdae_ckpt, Some(&stage_hash(cfg, Stage::TrainSdae)))?;
    let models = PipelineModels {
        encoder: &encoder,
        denoiser: &denoiser,
        classifier: &classifier,
        schedule: &schedule,
        n_steps: cfg.sdae.n_steps,
    };
    let mut images: Vec<Pixels> = split.test.iter().map(|im| im.pixels.clone()).collect();
    if cfg.explain.metric_samples > 0 && images.len() > cfg.explain.metric_samples {
        images.truncate(cfg.explain.metric_samples);
    }
    let report = reconstruction_metrics(&images, &models)?;
    atomic_write(&paths.metrics_file, report.to_text().as_bytes())?;
    Ok(vec![paths.metrics_file.clone()])
}

/// Compose the human-readable summary. Returns the summary text; fails with
/// a dependency error listing missing stages (after flagging them in the
/// written summary).
pub fn write_report(cfg: &ExperimentConfig, paths: &ArtifactPaths) -> Result<String> {
    let mut s = String::new();
    let mut missing: Vec<&str> = Vec::new();
    let _ = writeln!(s, "diffex pipeline summary (schema {})", crate::config::SCHEMA_VERSION);
    let _ = writeln!(s, "config hash: {}", stage_hash(cfg, Stage::Report));
    let _ = writeln!(s, "seed: {}", cfg.seed);

    let _ = writeln!(s, "\n## dataset");
    match load_data(paths) {
        Ok(split) => {
            let _ = writeln!(
                s,
                "images: {} (train {} / val {} / test {})",
                split.total_len(),
                split.train.len(),
                split.val.len(),
                split.test.len()
            );
            let _ = writeln!(s, "side: {}", cfg.datagen.side);
        }
        Err(_) => {
            missing.push(Stage::Datagen.name());
            let _ = writeln!(s, "MISSING (run datagen)");
        }
    }

    let _ = writeln!(s, "\n## classifier");
    match load_classifier(&paths.classifier_ckpt, None) {
        Ok((model, report)) => {
            match report.test_accuracy {
                Some(acc) => {
                    let _ = writeln!(s, "test accuracy: {acc}");
                }
                None => {
                    let _ = writeln!(s, "test accuracy: n/a (no test split)");
                }
            }
            let _ = writeln!(s, "epochs: {}", report.epoch_losses.len());
            let _ = writeln!(s, "parameter checksum: {:016x}", model.checksum());
        }
        Err(_) => {
            missing.push(Stage::TrainClassifier.name());
            let _ = writeln!(s, "MISSING (run train-classifier)");
        }
    }

    let _ = writeln!(s, "\n## semantic autoencoder");
    match load_sdae(&paths.sdae_ckpt, None) {
        Ok((encoder, denoiser, _, report)) => {
            let _ = writeln!(
                s,
                "final diffusion loss: {}",
                report.diffusion_losses.last().copied().unwrap_or(f64::NAN)
            );
            let _ = writeln!(
                s,
                "final cls loss: {}",
                report.cls_losses.last().copied().unwrap_or(f64::NAN)
            );
            let _ = writeln!(s, "encoder checksum: {:016x}", encoder.checksum());
            let _ = writeln!(s, "denoiser checksum: {:016x}", denoiser.checksum());
        }
        Err(_) => {
            missing.push(Stage::TrainSdae.name());
            let _ = writeln!(s, "MISSING (run train-sdae)");
        }
    }
    match std::fs::read_to_string(&paths.metrics_file) {
        Ok(text) => match MetricReport::from_text(&text) {
            Ok(m) => {
                let _ = writeln!(
                    s,
                    "reconstruction: ssim {} mse {} perceptual {} kid {} agreement {} (n={})",
                    m.ssim, m.mse, m.perceptual, m.kid, m.agreement, m.n_samples
                );
            }
            Err(_) => {
                missing.push(Stage::Metrics.name());
                let _ = writeln!(s, "metrics: UNREADABLE (re-run metrics)");
            }
        },
        Err(_) => {
            missing.push(Stage::Metrics.name());
            let _ = writeln!(s, "metrics: MISSING (run metrics)");
        }
    }

    let _ = writeln!(s, "\n## ranking");
    match load_ranking_report(&paths.ranking_report) {
        Ok(r) => {
            let _ = writeln!(s, "target class: {}", r.target_class);
            let _ = writeln!(s, "pool size: {}", r.pool_ids.len());
            if r.outcome.selections.is_empty() {
                let _ = writeln!(s, "selections: none passed the threshold");
            }
            for (i, sel) in r.outcome.selections.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{}. direction {} ({}): mean delta {}, explained {} images",
                    i + 1,
                    sel.direction,
                    if sel.sign >= 0 { "positive" } else { "negative" },
                    sel.mean_delta,
                    sel.explained_ids.len()
                );
            }
        }
        Err(_) => {
            missing.push(Stage::Rank.name());
            let _ = writeln!(s, "MISSING (run rank)");
        }
    }

    let _ = writeln!(s, "\n## explanations");
    match std::fs::read_to_string(paths.grids_dir.join("index.json")) {
        Ok(text) => {
            let grids: Vec<String> = serde_json::from_str::<serde_json::Value>(&text)
                .ok()
                .and_then(|v| serde_json::from_value(v["grids"].clone()).ok())
                .unwrap_or_default();
            if grids.is_empty() {
                let _ = writeln!(s, "no directions passed the ranking threshold; no grids");
            } else {
                for g in &grids {
                    let _ = writeln!(s, "- grids/{g}");
                }
            }
        }
        Err(_) => {
            missing.push(Stage::Explain.name());
            let _ = writeln!(s, "MISSING (run explain)");
        }
    }

    if !missing.is_empty() {
        let _ = writeln!(s, "\nMISSING STAGES: {}", missing.join(", "));
    }
    atomic_write(&paths.summary_file, s.as_bytes())?;
    if missing.is_empty() {
        Ok(s)
    } else {
        Err(Error::Dependency(missing.join(", ")))
    }
}

/// Run one stage end to end: dependency checks, computation, atomic outputs,
/// run-manifest record. The caller holds the directory lock.
pub fn run_stage(stage: Stage, cfg: &ExperimentConfig, paths: &ArtifactPaths) -> Result<()> {
    std::fs::create_dir_all(&paths.root)
        .map_err(|e| Error::io(paths.root.display().to_string(), e))?;
    atomic_write(&paths.config_echo(), cfg.to_toml_string().as_bytes())?;
    let inputs: Vec<FileHash> = stage_input_files(stage, paths)
        .into_iter()
        .filter(|p| p.exists())
        .map(|p| hash_file(&paths.root, &p))
        .collect();
    let start = Instant::now();
    let outputs = match stage {
        Stage::Datagen => stage_datagen(cfg, paths)?,
        Stage::TrainClassifier => stage_train_classifier(cfg, paths)?,
        Stage::TrainSdae => stage_train_sdae(cfg, paths)?,
        Stage::Discover => stage_discover(cfg, paths)?,
        Stage::Rank => stage_rank(cfg, paths)?,
        Stage::Explain => stage_explain(cfg, paths)?,
        Stage::Metrics => stage_metrics(cfg, paths)?,
        Stage::Report => {
            write_report(cfg, paths)?;
            vec![paths.summary_file.clone()]
        }
    };
    let record = RunRecord {
        stage: stage.name().to_string(),
        seed: cfg.seed,
        duration_ms: start.elapsed().as_millis(),
        inputs,
        outputs: outputs.iter().map(|p| hash_file(&paths.root, p)).collect(),
    };
    append_manifest(paths, &record)
}

fn stage_input_files(stage: Stage, paths: &ArtifactPaths) -> Vec<PathBuf> {
    let data = paths.data_dir.join("manifest.jsonl");
    match stage {
        Stage::Datagen => vec![],
        Stage::TrainClassifier => vec![data],
        Stage::TrainSdae => vec![data, paths.classifier_ckpt.clone()],
        Stage::Discover => vec![data, paths.classifier_ckpt.clone(), paths.sdae_ckpt.clone()],
        Stage::Rank => vec![
            data,
            paths.classifier_ckpt.clone(),
            paths.sdae_ckpt.clone(),
            paths.directions_ckpt.clone(),
        ],
        Stage::Explain => vec![
            data,
            paths.classifier_ckpt.clone(),
            paths.sdae_ckpt.clone(),
            paths.directions_ckpt.clone(),
            paths.ranking_report.clone(),
        ],
        Stage::Metrics => vec![data, paths.classifier_ckpt.clone(), paths.sdae_ckpt.clone()],
        Stage::Report => vec![
            data,
            paths.classifier_ckpt.clone(),
            paths.sdae_ckpt.clone(),
            paths.directions_ckpt.clone(),
            paths.ranking_report.clone(),
            paths.metrics_file.clone(),
        ],
    }
}

pub const ALL_STAGES: [Stage; 8] = [
    Stage::Datagen,
    Stage::TrainClassifier,
    Stage::TrainSdae,
    Stage::Discover,
    Stage::Rank,
    Stage::Explain,
    Stage::Metrics,
    Stage::Report,
];

/// Run the whole pipeline under one lock.
pub fn run_all(cfg: &ExperimentConfig, paths: &ArtifactPaths) -> Result<()> {
    let _lock = acquire_lock(paths)?;
    for stage in ALL_STAGES {
        run_stage(stage, cfg, paths)?;
    }
    Ok(())
}
