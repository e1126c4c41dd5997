//! `diffex`: single binary covering the full pipeline.
//!
//! Stages operate on an artifact directory (flag `--artifacts`, or the
//! `DIFFEX_ARTIFACTS` environment variable, default `./artifacts`); file
//! flags override individual artifact paths. Exit codes: 0 success,
//! 1 validation error, 2 dependency error, 3 training divergence, 4 i/o.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffex_core::config::{parse_config, ExperimentConfig, Stage};
use diffex_core::pipeline::{acquire_lock, run_all, run_stage, ArtifactPaths};
use diffex_core::Error;

#[derive(Parser)]
#[command(
    name = "diffex",
    about = "Explain a frozen image classifier with a classifier-aware diffusion autoencoder",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Artifact directory (or set DIFFEX_ARTIFACTS).
    #[arg(long)]
    artifacts: Option<PathBuf>,
    /// Override the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-class dataset.
    Datagen {
        #[command(flatten)]
        common: Common,
        /// Dataset output directory (defaults to <artifacts>/data).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and freeze the classifier.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (defaults to <artifacts>/data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint output path (defaults to <artifacts>/classifier.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the semantic diffusion autoencoder.
    TrainSdae {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Classifier checkpoint (defaults to <artifacts>/classifier.ckpt).
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Discover contrastive latent directions.
    Discover {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sdae: Option<PathBuf>,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank directions by classifier-probability shift.
    Rank {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        sdae: Option<PathBuf>,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Ranking report output (defaults to <artifacts>/ranking.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render counterfactual grids along ranked directions.
    Explain {
        #[command(flatten)]
        common: Common,
        /// Ranking report (defaults to <artifacts>/ranking.json).
        #[arg(long)]
        rank: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Grid output directory (defaults to <artifacts>/grids).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute reconstruction metrics on the test split.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        sdae: Option<PathBuf>,
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Metrics file output (defaults to <artifacts>/metrics.txt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a completed pipeline.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Run every stage in order.
    RunAll {
        #[command(flatten)]
        common: Common,
    },
}

fn artifact_root(common: &Common) -> PathBuf {
    common
        .artifacts
        .clone()
        .or_else(|| std::env::var_os("DIFFEX_ARTIFACTS").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("artifacts"))
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = parse_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run_locked_stage(
    stage: Stage,
    common: &Common,
    adjust: impl FnOnce(&mut ArtifactPaths),
) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let mut paths = ArtifactPaths::new(artifact_root(common));
    adjust(&mut paths);
    let _lock = acquire_lock(&paths)?;
    run_stage(stage, &cfg, &paths)
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Datagen { common, out } => run_locked_stage(Stage::Datagen, &common, |p| {
            if let Some(out) = out {
                p.data_dir = out;
            }
        }),
        Command::TrainClassifier { common, data, out } => {
            run_locked_stage(Stage::TrainClassifier, &common, |p| {
                if let Some(d) = data {
                    p.data_dir = d;
                }
                if let Some(o) = out {
                    p.classifier_ckpt = o;
                }
            })
        }
        Command::TrainSdae {
            common,
            data,
            classifier,
            out,
        } => run_locked_stage(Stage::TrainSdae, &common, |p| {
            if let Some(d) = data {
                p.data_dir = d;
            }
            if let Some(c) = classifier {
                p.classifier_ckpt = c;
            }
            if let Some(o) = out {
                p.sdae_ckpt = o;
            }
        }),
        Command::Discover {
            common,
            sdae,
            classifier,
            data,
            out,
        } => run_locked_stage(Stage::Discover, &common, |p| {
            if let Some(d) = data {
                p.data_dir = d;
            }
            if let Some(c) = classifier {
                p.classifier_ckpt = c;
            }
            if let Some(s) = sdae {
                p.sdae_ckpt = s;
            }
            if let Some(o) = out {
                p.directions_ckpt = o;
            }
        }),
        Command::Rank {
            common,
            bank,
            sdae,
            classifier,
            data,
            out,
        } => run_locked_stage(Stage::Rank, &common, |p| {
            if let Some(d) = data {
                p.data_dir = d;
            }
            if let Some(c) = classifier {
                p.classifier_ckpt = c;
            }
            if let Some(s) = sdae {
                p.sdae_ckpt = s;
            }
            if let Some(b) = bank {
                p.directions_ckpt = b;
            }
            if let Some(o) = out {
                p.ranking_report = o;
            }
        }),
        Command::Explain {
            common,
            rank,
            data,
            out,
        } => run_locked_stage(Stage::Explain, &common, |p| {
            if let Some(d) = data {
                p.data_dir = d;
            }
            if let Some(r) = rank {
                p.ranking_report = r;
            }
            if let Some(o) = out {
                p.grids_dir = o;
            }
        }),
        Command::Metrics {
            common,
            data,
            sdae,
            classifier,
            out,
        } => run_locked_stage(Stage::Metrics, &common, |p| {
            if let Some(d) = data {
                p.data_dir = d;
            }
            if let Some(c) = classifier {
                p.classifier_ckpt = c;
            }
            if let Some(s) = sdae {
                p.sdae_ckpt = s;
            }
            if let Some(o) = out {
                p.metrics_file = o;
            }
        }),
        Command::Report { common } => {
            let cfg = load_config(&common)?;
            let paths = ArtifactPaths::new(artifact_root(&common));
            let _lock = acquire_lock(&paths)?;
            let summary = diffex_core::pipeline::write_report(&cfg, &paths)?;
            print!("{summary}");
            Ok(())
        }
        Command::RunAll { common } => {
            let cfg = load_config(&common)?;
            let paths = ArtifactPaths::new(artifact_root(&common));
            run_all(&cfg, &paths)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
