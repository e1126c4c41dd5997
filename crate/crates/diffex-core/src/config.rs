//! Experiment configuration: one TOML file with a closed, versioned schema.
//!
//! Parsing walks the raw TOML against the schema and collects *every*
//! violation (unknown keys with a nearest-key suggestion, missing required
//! fields, type and range errors) instead of bailing at the first. All
//! hyperparameters live here; stages hash the sections they depend on so
//! checkpoints can refuse incompatible configs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::datagen::DatagenConfig;
use crate::directions::DirectionsConfig;
use crate::error::{Error, Result};
use crate::ranking::RankingConfig;
use crate::rng::fnv1a64;
use crate::semantic_ae::SdaeConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    /// Alpha sweep for counterfactual grids; must contain 0.
    pub alphas: Vec<f64>,
    /// Number of source images per grid.
    pub grid_images: usize,
    /// Cap on test images used for reconstruction metrics (0 = all).
    pub metric_samples: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            alphas: vec![0.0, 1.0, 2.0, 3.0],
            grid_images: 6,
            metric_samples: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub datagen: DatagenConfig,
    pub classifier: ClassifierConfig,
    pub sdae: SdaeConfig,
    pub directions: DirectionsConfig,
    pub ranking: RankingConfig,
    pub explain: ExplainConfig,
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed,
            datagen: DatagenConfig::default(),
            classifier: ClassifierConfig::default(),
            sdae: SdaeConfig::default(),
            directions: DirectionsConfig::default(),
            ranking: RankingConfig::default(),
            explain: ExplainConfig::default(),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Pipeline stages, in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Datagen,
    TrainClassifier,
    TrainSdae,
    Discover,
    Rank,
    Explain,
    Metrics,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Datagen => "datagen",
            Stage::TrainClassifier => "train-classifier",
            Stage::TrainSdae => "train-sdae",
            Stage::Discover => "discover",
            Stage::Rank => "rank",
            Stage::Explain => "explain",
            Stage::Metrics => "metrics",
            Stage::Report => "report",
        }
    }
}

/// Hash of the config sections a stage's artifact depends on (cumulative
/// along the pipeline). Checkpoints store it; loaders verify it.
pub fn stage_hash(cfg: &ExperimentConfig, stage: Stage) -> String {
    let mut parts: Vec<String> = vec![
        cfg.schema_version.to_string(),
        cfg.seed.to_string(),
        serde_json::to_string(&cfg.datagen).expect("serializes"),
    ];
    let include_classifier = !matches!(stage, Stage::Datagen);
    let include_sdae = matches!(
        stage,
        Stage::TrainSdae | Stage::Discover | Stage::Rank | Stage::Explain | Stage::Metrics | Stage::Report
    );
    let include_directions = matches!(stage, Stage::Discover | Stage::Rank | Stage::Explain | Stage::Report);
    let include_ranking = matches!(stage, Stage::Rank | Stage::Explain | Stage::Report);
    if include_classifier {
        parts.push(serde_json::to_string(&cfg.classifier).expect("serializes"));
    }
    if include_sdae {
        parts.push(serde_json::to_string(&cfg.sdae).expect("serializes"));
    }
    if include_directions {
        parts.push(serde_json::to_string(&cfg.directions).expect("serializes"));
    }
    if include_ranking {
        parts.push(serde_json::to_string(&cfg.ranking).expect("serializes"));
    }
    format!("{:016x}", fnv1a64(parts.join("|").as_bytes()))
}

fn levenshtein(a: &str, b: &str) -> usize {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            cur[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn suggest(key: &str, allowed: &[&str]) -> String {
    allowed
        .iter()
        .map(|c| (levenshtein(key, c), *c))
        .min()
        .filter(|(d, _)| *d <= 3)
        .map(|(_, c)| format!(" (did you mean `{c}`?)"))
        .unwrap_or_default()
}

struct Walker {
    errors: Vec<String>,
}

impl Walker {
    fn check_keys(&mut self, table: &toml::Table, path: &str, allowed: &[&str]) {
        for key in table.keys() {
            if !allowed.contains(&key.as_str()) {
                let loc = if path.is_empty() {
                    key.clone()
                } else {
                    format!("{path}.{key}")
                };
                self.errors
                    .push(format!("{loc}: unknown key{}", suggest(key, allowed)));
            }
        }
    }

    fn f64_field(&mut self, t: &toml::Table, path: &str, key: &str, lo: f64, hi: f64, out: &mut f64) {
        match t.get(key) {
            None => {}
            Some(v) => {
                let parsed = v.as_float().or_else(|| v.as_integer().map(|i| i as f64));
                match parsed {
                    Some(x) if (lo..=hi).contains(&x) => *out = x,
                    Some(x) => self.errors.push(format!(
                        "{path}.{key}: value {x} outside allowed range [{lo}, {hi}]"
                    )),
                    None => self
                        .errors
                        .push(format!("{path}.{key}: expected a number")),
                }
            }
        }
    }

    fn usize_field(&mut self, t: &toml::Table, path: &str, key: &str, lo: usize, hi: usize, out: &mut usize) {
        match t.get(key) {
            None => {}
            Some(v) => match v.as_integer() {
                Some(x) if x >= 0 && (lo..=hi).contains(&(x as usize)) => *out = x as usize,
                Some(x) => self.errors.push(format!(
                    "{path}.{key}: value {x} outside allowed range [{lo}, {hi}]"
                )),
                None => self
                    .errors
                    .push(format!("{path}.{key}: expected an integer")),
            },
        }
    }

    fn bool_field(&mut self, t: &toml::Table, path: &str, key: &str, out: &mut bool) {
        if let Some(v) = t.get(key) {
            match v.as_bool() {
                Some(b) => *out = b,
                None => self.errors.push(format!("{path}.{key}: expected a boolean")),
            }
        }
    }

    fn f64_pair(&mut self, t: &toml::Table, path: &str, key: &str, out: &mut (f64, f64)) {
        if let Some(v) = t.get(key) {
            let ok = v
                .as_array()
                .filter(|a| a.len() == 2)
                .and_then(|a| {
                    let lo = a[0].as_float().or_else(|| a[0].as_integer().map(|i| i as f64))?;
                    let hi = a[1].as_float().or_else(|| a[1].as_integer().map(|i| i as f64))?;
                    Some((lo, hi))
                });
            match ok {
                Some(pair) => *out = pair,
                None => self
                    .errors
                    .push(format!("{path}.{key}: expected a two-element numeric array")),
            }
        }
    }

    fn u32_pair(&mut self, t: &toml::Table, path: &str, key: &str, out: &mut (u32, u32)) {
        if let Some(v) = t.get(key) {
            let ok = v.as_array().filter(|a| a.len() == 2).and_then(|a| {
                let lo = a[0].as_integer().filter(|&i| i >= 0)?;
                let hi = a[1].as_integer().filter(|&i| i >= 0)?;
                Some((lo as u32, hi as u32))
            });
            match ok {
                Some(pair) => *out = pair,
                None => self.errors.push(format!(
                    "{path}.{key}: expected a two-element non-negative integer array"
                )),
            }
        }
    }

    fn usize_array<const N: usize>(&mut self, t: &toml::Table, path: &str, key: &str, out: &mut [usize; N]) {
        if let Some(v) = t.get(key) {
            let ok = v.as_array().filter(|a| a.len() == N).and_then(|a| {
                let mut res = [0usize; N];
                for (i, x) in a.iter().enumerate() {
                    res[i] = usize::try_from(x.as_integer()?).ok()?;
                }
                Some(res)
            });
            match ok {
                Some(arr) => *out = arr,
                None => self.errors.push(format!(
                    "{path}.{key}: expected an array of {N} non-negative integers"
                )),
            }
        }
    }

    fn table<'a>(&mut self, root: &'a toml::Table, key: &str) -> Option<&'a toml::Table> {
        match root.get(key) {
            None => None,
            Some(v) => match v.as_table() {
                Some(t) => Some(t),
                None => {
                    self.errors.push(format!("{key}: expected a table"));
                    None
                }
            },
        }
    }
}

/// Parse and validate a config from TOML text. On failure the error carries
/// every violation found.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let root: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(vec![format!("toml syntax: {e}")]))?;
    let mut w = Walker { errors: Vec::new() };
    w.check_keys(
        &root,
        "",
        &[
            "schema_version",
            "seed",
            "datagen",
            "classifier",
            "sdae",
            "directions",
            "ranking",
            "explain",
        ],
    );

    // required fields
    let mut cfg = ExperimentConfig::with_seed(0);
    match root.get("schema_version").and_then(|v| v.as_integer()) {
        Some(v) if v == SCHEMA_VERSION as i64 => cfg.schema_version = v as u32,
        Some(v) => w
            .errors
            .push(format!("schema_version: unsupported version {v}, expected {SCHEMA_VERSION}")),
        None => w
            .errors
            .push("schema_version: missing required field".to_string()),
    }
    match root.get("seed").and_then(|v| v.as_integer()) {
        Some(v) if v >= 0 => cfg.seed = v as u64,
        Some(v) => w.errors.push(format!("seed: must be non-negative, got {v}")),
        None => w.errors.push("seed: missing required field".to_string()),
    }

    if let Some(t) = w.table(&root, "datagen") {
        let p = "datagen";
        w.check_keys(
            t,
            p,
            &[
                "n_images",
                "side",
                "split_fractions",
                "max_nucleus_count",
                "noise_amplitude",
                "class0",
                "class1",
            ],
        );
        let d = &mut cfg.datagen;
        w.usize_field(t, p, "n_images", 4, 1_000_000, &mut d.n_images);
        w.usize_field(t, p, "side", 16, 512, &mut d.side);
        if let Some(v) = t.get("split_fractions") {
            let ok = v.as_array().filter(|a| a.len() == 3).and_then(|a| {
                Some((
                    a[0].as_float()?,
                    a[1].as_float()?,
                    a[2].as_float()?,
                ))
            });
            match ok {
                Some(fr) => d.split_fractions = fr,
                None => w.errors.push(format!(
                    "{p}.split_fractions: expected a three-element float array"
                )),
            }
        }
        let mut max_count = d.max_nucleus_count as usize;
        w.usize_field(t, p, "max_nucleus_count", 1, 64, &mut max_count);
        d.max_nucleus_count = max_count as u32;
        w.f64_field(t, p, "noise_amplitude", 0.0, 0.2, &mut d.noise_amplitude);
        for cls_key in ["class0", "class1"] {
            if let Some(ct) = w.table(t, cls_key) {
                let cp = format!("{p}.{cls_key}");
                w.check_keys(
                    ct,
                    &cp,
                    &[
                        "nucleus_count",
                        "nucleus_spacing",
                        "cytoplasm_intensity",
                        "organelle_scatter",
                    ],
                );
                let r = if cls_key == "class0" {
                    &mut d.class0
                } else {
                    &mut d.class1
                };
                w.u32_pair(ct, &cp, "nucleus_count", &mut r.nucleus_count);
                w.f64_pair(ct, &cp, "nucleus_spacing", &mut r.nucleus_spacing);
                w.f64_pair(ct, &cp, "cytoplasm_intensity", &mut r.cytoplasm_intensity);
                w.f64_pair(ct, &cp, "organelle_scatter", &mut r.organelle_scatter);
            }
        }
    }

    if let Some(t) = w.table(&root, "classifier") {
        let p = "classifier";
        w.check_keys(t, p, &["epochs", "batch_size", "lr", "channels", "augment_noise"]);
        let c = &mut cfg.classifier;
        w.usize_field(t, p, "epochs", 1, 1000, &mut c.epochs);
        w.usize_field(t, p, "batch_size", 1, 4096, &mut c.batch_size);
        w.f64_field(t, p, "lr", 1e-8, 1.0, &mut c.lr);
        w.usize_array(t, p, "channels", &mut c.channels);
        w.f64_field(t, p, "augment_noise", 0.0, 0.5, &mut c.augment_noise);
    }

    if let Some(t) = w.table(&root, "sdae") {
        let p = "sdae";
        w.check_keys(
            t,
            p,
            &[
                "t_max",
                "beta_start",
                "beta_end",
                "d_z",
                "lambda1",
                "epochs",
                "batch_size",
                "lr",
                "n_steps",
                "grad_clip",
                "emb_dim",
                "denoiser_channels",
                "encoder_channels",
                "full_sampling_cls",
                "ablate_cls",
                "ema_decay",
                "lr_decay",
            ],
        );
        let s = &mut cfg.sdae;
        w.usize_field(t, p, "t_max", 1, 10_000, &mut s.t_max);
        w.f64_field(t, p, "beta_start", 1e-8, 0.999, &mut s.beta_start);
        w.f64_field(t, p, "beta_end", 1e-8, 0.999, &mut s.beta_end);
        w.usize_field(t, p, "d_z", 1, 4096, &mut s.d_z);
        w.f64_field(t, p, "lambda1", 0.0, 1e6, &mut s.lambda1);
        w.usize_field(t, p, "epochs", 1, 10_000, &mut s.epochs);
        w.usize_field(t, p, "batch_size", 1, 4096, &mut s.batch_size);
        w.f64_field(t, p, "lr", 1e-8, 1.0, &mut s.lr);
        w.usize_field(t, p, "n_steps", 1, 10_000, &mut s.n_steps);
        w.f64_field(t, p, "grad_clip", 0.0, 1e6, &mut s.grad_clip);
        w.usize_field(t, p, "emb_dim", 2, 4096, &mut s.emb_dim);
        w.usize_array(t, p, "denoiser_channels", &mut s.denoiser_channels);
        w.usize_array(t, p, "encoder_channels", &mut s.encoder_channels);
        w.bool_field(t, p, "full_sampling_cls", &mut s.full_sampling_cls);
        w.bool_field(t, p, "ablate_cls", &mut s.ablate_cls);
        w.f64_field(t, p, "ema_decay", 0.0, 0.99999, &mut s.ema_decay);
        w.f64_field(t, p, "lr_decay", 1e-3, 1.0, &mut s.lr_decay);
    }

    if let Some(t) = w.table(&root, "directions") {
        let p = "directions";
        w.check_keys(
            t,
            p,
            &[
                "k",
                "d_f",
                "mlp1_hidden",
                "mlp2_hidden",
                "tau",
                "lambda2",
                "alpha_min",
                "alpha_max",
                "epochs",
                "batch_size",
                "lr",
                "ablate_reg",
            ],
        );
        let d = &mut cfg.directions;
        w.usize_field(t, p, "k", 2, 256, &mut d.k);
        w.usize_field(t, p, "d_f", 1, 4096, &mut d.d_f);
        w.usize_field(t, p, "mlp1_hidden", 1, 8192, &mut d.mlp1_hidden);
        w.usize_field(t, p, "mlp2_hidden", 1, 8192, &mut d.mlp2_hidden);
        w.f64_field(t, p, "tau", 1e-6, 100.0, &mut d.tau);
        w.f64_field(t, p, "lambda2", 0.0, 1e6, &mut d.lambda2);
        w.f64_field(t, p, "alpha_min", 1e-6, 100.0, &mut d.alpha_min);
        w.f64_field(t, p, "alpha_max", 1e-6, 100.0, &mut d.alpha_max);
        w.usize_field(t, p, "epochs", 1, 10_000, &mut d.epochs);
        w.usize_field(t, p, "batch_size", 2, 4096, &mut d.batch_size);
        w.f64_field(t, p, "lr", 1e-8, 1.0, &mut d.lr);
        w.bool_field(t, p, "ablate_reg", &mut d.ablate_reg);
    }

    if let Some(t) = w.table(&root, "ranking") {
        let p = "ranking";
        w.check_keys(
            t,
            p,
            &[
                "alpha_rank",
                "tau_rank",
                "per_image_delta",
                "n_max",
                "target_class",
                "pool_size",
            ],
        );
        let r = &mut cfg.ranking;
        w.f64_field(t, p, "alpha_rank", 1e-6, 100.0, &mut r.alpha_rank);
        w.f64_field(t, p, "tau_rank", 1e-9, 0.999, &mut r.tau_rank);
        w.f64_field(t, p, "per_image_delta", 1e-9, 0.999, &mut r.per_image_delta);
        w.usize_field(t, p, "n_max", 1, 512, &mut r.n_max);
        w.usize_field(t, p, "target_class", 0, 1, &mut r.target_class);
        w.usize_field(t, p, "pool_size", 1, 100_000, &mut r.pool_size);
    }

    if let Some(t) = w.table(&root, "explain") {
        let p = "explain";
        w.check_keys(t, p, &["alphas", "grid_images", "metric_samples"]);
        let e = &mut cfg.explain;
        if let Some(v) = t.get("alphas") {
            let ok = v.as_array().and_then(|a| {
                a.iter()
                    .map(|x| x.as_float().or_else(|| x.as_integer().map(|i| i as f64)))
                    .collect::<Option<Vec<f64>>>()
            });
            match ok {
                Some(al) if !al.is_empty() => e.alphas = al,
                _ => w
                    .errors
                    .push(format!("{p}.alphas: expected a non-empty numeric array")),
            }
        }
        w.usize_field(t, p, "grid_images", 1, 256, &mut e.grid_images);
        w.usize_field(t, p, "metric_samples", 0, 1_000_000, &mut e.metric_samples);
    }

    // cross-field checks
    if w.errors.is_empty() {
        if let Err(Error::Input(msg)) = cfg.datagen.validate() {
            w.errors.push(format!("datagen: {msg}"));
        }
        if cfg.sdae.beta_start > cfg.sdae.beta_end {
            w.errors
                .push("sdae: beta_start must not exceed beta_end".to_string());
        }
        if cfg.sdae.n_steps > cfg.sdae.t_max {
            w.errors
                .push("sdae.n_steps: must not exceed sdae.t_max".to_string());
        }
        if !cfg.sdae.emb_dim.is_multiple_of(2) {
            w.errors.push("sdae.emb_dim: must be even".to_string());
        }
        if !cfg.datagen.side.is_multiple_of(8) {
            w.errors
                .push("datagen.side: must be divisible by 8 for the denoiser".to_string());
        }
        if cfg.directions.alpha_min > cfg.directions.alpha_max {
            w.errors
                .push("directions.alpha_min: must not exceed alpha_max".to_string());
        }
        if let Err(Error::Input(msg)) = cfg.ranking.validate(cfg.directions.k) {
            w.errors.push(msg);
        }
        if !cfg.explain.alphas.contains(&0.0) {
            w.errors
                .push("explain.alphas: sweep must include 0".to_string());
        }
    }

    if w.errors.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(w.errors))
    }
}

/// Parse and validate a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config_str(&text)
}
