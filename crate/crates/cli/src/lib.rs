//! Command-line driver: data generation, training, evaluation, ablation
//! grids and embedding export.

mod commands;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use cawcl_core::ErrorKind;

pub use commands::{
    cmd_ablate, cmd_eval, cmd_export_embeddings, cmd_gen_data, cmd_train, read_embeddings,
    AblationOutcome, EmbeddingRow, EvalSource, TrainArtifacts, EMBEDDING_COLUMNS,
};

/// Environment variable consulted for the seed when neither a flag nor the
/// configuration sets one.
pub const SEED_ENV: &str = "CAWCL_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "cawcl",
    version,
    about = "Camera-aware unsupervised adaptation for video re-identification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// key=value configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed; takes precedence over the configuration and CAWCL_SEED
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-camera dataset
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Generator preset: default or noisy_clusters
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm up on the source domain, adapt to the target, write metrics,
    /// checkpoint and manifest
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset file; defaults to the `run.dataset` key of the config
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval metrics of a checkpoint on a dataset's target tracklets, or
    /// of an exported embedding table
    Eval {
        #[arg(long, requires = "data", conflicts_with = "embeddings")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Embedding table written by export-embeddings
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Clips per tracklet when building representations
        #[arg(long, default_value_t = 2)]
        n_clips: usize,
    },
    /// Run a grid of training configurations over several seeds
    Ablate {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip cells whose results already exist
        #[arg(long)]
        resume: bool,
    },
    /// Write one normalised representation per tracklet, with labels
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training configuration supplying clip count and clustering
        /// parameters
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Process exit code for an error: 1 configuration, 2 data, 3 numerical.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<cawcl_core::Error>() {
            return match e.kind() {
                ErrorKind::Config => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            };
        }
        if cause.downcast_ref::<clap::Error>().is_some() {
            return 1;
        }
    }
    1
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            config,
            preset,
            out,
        } => cmd_gen_data(&config, preset.as_deref(), &out),
        Command::Train { config, data, out } => {
            cmd_train(&config, data.as_deref(), &out).map(|_| ())
        }
        Command::Eval {
            checkpoint,
            data,
            embeddings,
            n_clips,
        } => {
            let source = match (checkpoint, data, embeddings) {
                (_, _, Some(path)) => EvalSource::Embeddings(path),
                (Some(checkpoint), Some(data), None) => EvalSource::Checkpoint {
                    checkpoint,
                    data,
                    n_clips,
                },
                _ => {
                    return Err(cawcl_core::Error::BadConfig(
                        "eval needs --embeddings, or --checkpoint with --data".into(),
                    )
                    .into())
                }
            };
            let report = cmd_eval(&source)?;
            println!("rank1,rank5,rank10,mAP,camera_probe_acc");
            println!(
                "{}",
                [
                    report.rank1,
                    report.rank5,
                    report.rank10,
                    report.map,
                    report.camera_probe_accuracy
                ]
                .map(cawcl_core::eval::fmt_sig)
                .join(",")
            );
            Ok(())
        }
        Command::Ablate { suite, out, resume } => cmd_ablate(&suite, &out, resume).map(|_| ()),
        Command::ExportEmbeddings {
            checkpoint,
            data,
            out,
            config,
        } => cmd_export_embeddings(&checkpoint, &data, &out, &config),
    }
}
