use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "sal", version, about = "Slice alignment pre-training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every training-related subcommand.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `loss.lambda=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset and its manifest.
    Synth {
        #[arg(long, default_value_t = 20)]
        subjects: usize,
        /// Slices per volume.
        #[arg(long = "V", default_value_t = 24)]
        slices: usize,
        /// In-plane size (square).
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the encoder without labels.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a pre-training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a segmentation model on labeled subjects.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated subject ids whose labels are used.
        #[arg(long, value_delimiter = ',', required = true)]
        subjects: Vec<String>,
        /// Pre-training checkpoint for the encoder; random init otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cross-validated comparison of random init and pre-trained encoders.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// `name=path` of a pre-training checkpoint. Repeatable.
        #[arg(long = "checkpoint", value_name = "NAME=PATH")]
        checkpoints: Vec<String>,
        /// Leave out the random-initialization baseline.
        #[arg(long)]
        no_random: bool,
    },
    /// Pre-train and evaluate once per value of `loss.lambda` or `loss.omega`.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = ["lambda", "omega"])]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (result, out) = match cli.command {
        Command::Synth {
            subjects,
            slices,
            size,
            seed,
            out,
        } => (commands::synth(subjects, slices, size, seed, &out), out),
        Command::Pretrain { run, resume } => {
            let out = run.out.clone();
            (commands::pretrain(&run, resume.as_deref()), out)
        }
        Command::Finetune {
            run,
            subjects,
            checkpoint,
        } => {
            let out = run.out.clone();
            (commands::finetune(&run, &subjects, checkpoint.as_deref()), out)
        }
        Command::Evaluate {
            run,
            checkpoints,
            no_random,
        } => {
            let out = run.out.clone();
            (commands::evaluate(&run, &checkpoints, !no_random), out)
        }
        Command::Sweep { run, param, values } => {
            let out = run.out.clone();
            (commands::sweep(&run, &param, &values), out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "status": "error",
                "kind": e.kind(),
                "message": e.to_string(),
            });
            eprintln!("{record}");
            if out.is_dir() {
                let _ = std::fs::write(out.join("error.json"), record.to_string() + "\n");
            }
            ExitCode::FAILURE
        }
    }
}
