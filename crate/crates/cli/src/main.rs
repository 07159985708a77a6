//! `ffr`: data generation, training, evaluation and ablations.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::run::CliError;

#[derive(Parser)]
#[command(name = "ffr", version, about = "Feature rectification for masked-face recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Config JSON; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Derives the data, encoder, training and evaluation seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent of the run directories.
    #[arg(long, value_name = "DIR", default_value = "runs")]
    pub out: PathBuf,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Load checkpoints written under a different config.
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset to PGM files plus a manifest.
    GenData(Common),
    /// Pretrain and freeze the encoder.
    Pretrain(Common),
    /// Train the rectifier, resuming from the run's checkpoint if present.
    Train(Common),
    /// Accuracy over the masked-ratio sweep for every scorer.
    EvalSweep {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate instead of the run's own.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Decide whether two PGM images show the same identity.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        first: PathBuf,
        second: PathBuf,
    },
    /// Rank-1 identification against a distractor gallery.
    Identify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Write original and rectified features of the evaluation set.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate one ablation variant (A, B, C1-C3, D1-D3, E).
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tag: String,
    },
    /// Gradient and invariant checks.
    Selftest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Random instances per gradient case.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::Pretrain(c) => commands::pretrain(&c),
        Command::Train(c) => commands::train(&c),
        Command::EvalSweep { common, checkpoint } => commands::eval_sweep(&common, checkpoint.as_deref()),
        Command::Verify {
            common,
            checkpoint,
            first,
            second,
        } => commands::verify(&common, checkpoint.as_deref(), &first, &second),
        Command::Identify { common, checkpoint } => commands::identify(&common, checkpoint.as_deref()),
        Command::ExportEmbeddings { common, checkpoint } => commands::export_embeddings(&common, checkpoint.as_deref()),
        Command::Ablate { common, tag } => commands::ablate(&common, &tag),
        Command::Selftest { seed, instances } => commands::selftest(seed, instances),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
