//! Command-line interface: cohort generation, pretraining, fine-tuning,
//! evaluation, ablations, the distortion-index experiment, and voxel
//! importance export.

mod commands;

use anyhow::Result;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "mindtuner",
    about = "Desk-scale cross-subject visual decoding laboratory",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
pub(crate) struct CommonArgs {
    /// experiment configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// allow replacing existing outputs
    #[arg(long)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort dataset
    GenCohort {
        #[command(flatten)]
        common: CommonArgs,
        /// output dataset directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the shared model over the pretraining subjects
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        /// dataset directory (from gen-cohort)
        #[arg(long)]
        dataset: PathBuf,
        /// resume from an existing pretrained checkpoint
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// output checkpoint directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the held-out subject on scarce data
    Finetune {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// pretrained checkpoint directory
        #[arg(long)]
        checkpoint: PathBuf,
        /// resume from an adapted checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// limit training to the first N sessions (overrides the config)
        #[arg(long)]
        sessions: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split and write a metrics report
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// adapted (or pretrained) checkpoint directory
        #[arg(long)]
        checkpoint: PathBuf,
        /// metrics JSON path
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured ablation grid from a shared pretrained checkpoint
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// pretrained checkpoint directory
        #[arg(long)]
        checkpoint: PathBuf,
        /// limit fine-tuning to the first N sessions
        #[arg(long)]
        sessions: Option<usize>,
        /// output directory (one metrics JSON per cell + summary)
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate the position-matching experiment and export DI fits
    Fingerprint {
        #[command(flatten)]
        common: CommonArgs,
        /// output directory (fingerprint.json + di_scatter.csv)
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-voxel importance maps for an adapted checkpoint
    Importance {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// adapted checkpoint directory
        #[arg(long)]
        checkpoint: PathBuf,
        /// importance JSON path
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenCohort { common, out } => commands::gen_cohort(&common, &out),
        Command::Pretrain {
            common,
            dataset,
            checkpoint,
            out,
        } => commands::pretrain(&common, &dataset, checkpoint.as_deref(), &out),
        Command::Finetune {
            common,
            dataset,
            checkpoint,
            resume,
            sessions,
            out,
        } => commands::finetune(&common, &dataset, &checkpoint, resume.as_deref(), sessions, &out),
        Command::Eval {
            common,
            dataset,
            checkpoint,
            out,
        } => commands::eval(&common, &dataset, &checkpoint, &out),
        Command::Ablate {
            common,
            dataset,
            checkpoint,
            sessions,
            out,
        } => commands::ablate(&common, &dataset, &checkpoint, sessions, &out),
        Command::Fingerprint { common, out } => commands::fingerprint(&common, &out),
        Command::Importance {
            common,
            dataset,
            checkpoint,
            out,
        } => commands::importance(&common, &dataset, &checkpoint, &out),
    }
}
