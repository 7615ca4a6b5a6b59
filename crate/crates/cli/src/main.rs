use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use crdnet_cli::commands::{self, Estimates};
use crdnet_cli::config::ExperimentConfig;
use crdnet_cli::dataset::Split;

#[derive(Parser)]
#[command(name = "crdnet", version, about = "Cascaded residual density network for crowd counting")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (default --out: the config's data_dir).
    Synth {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Build ground-truth density maps (default --out: <data_dir>/density).
    Gt {
        /// Directory of annotation JSON files [default: <data_dir>/annotations].
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Pretrain level by level, then fine-tune end to end.
    Train,
    /// Count errors on a split; prints `MAE=<v> MSE=<v>` last.
    Eval {
        /// [default: <output_dir>/checkpoint.crdc]
        #[arg(long, conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory of `<id>.crd` maps to score instead of running the network.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Estimate the density map of one image (default --out: <output_dir>/infer).
    Infer {
        #[arg(long)]
        image: PathBuf,
        /// [default: <output_dir>/checkpoint.crdc]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also export every level's density and residual maps.
        #[arg(long)]
        levels: bool,
    },
    /// Fine-tune with L_E and with L_E + L_Y from shared pretraining and compare.
    Ablate,
}

fn run(cli: Cli, log: &mut dyn Write) -> Result<()> {
    let common = cli.common;
    let base = ExperimentConfig::load_or_default(common.config.as_deref())?;
    let seed = common.seed;
    match cli.command {
        Command::Synth { count } => {
            let cfg = base.resolve(seed, None)?;
            let out = common.out.unwrap_or_else(|| cfg.data_dir.clone());
            commands::synth(&cfg, count.unwrap_or(cfg.scenes), &out, log)
        }
        Command::Gt { annotations, sigma } => {
            let cfg = base.resolve(seed, None)?;
            let annotations = annotations.unwrap_or_else(|| cfg.data_dir.join("annotations"));
            let out = common.out.unwrap_or_else(|| cfg.density_dir());
            commands::gt(&annotations, sigma.unwrap_or(cfg.sigma), &out, log)
        }
        Command::Train => commands::train(&base.resolve(seed, common.out.as_deref())?, log),
        Command::Eval { checkpoint, predictions, split } => {
            let cfg = base.resolve(seed, None)?;
            let out = common.out.unwrap_or_else(|| cfg.output_dir.clone());
            let default_ckpt = cfg.output_dir.join(commands::CHECKPOINT);
            let source = match &predictions {
                Some(dir) => Estimates::Predictions(dir),
                None => Estimates::Checkpoint(checkpoint.as_deref().unwrap_or(&default_ckpt)),
            };
            commands::eval(&cfg, source, split, &out, log)
        }
        Command::Infer { image, checkpoint, levels } => {
            let cfg = base.resolve(seed, None)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.output_dir.join(commands::CHECKPOINT));
            let out = common.out.unwrap_or_else(|| cfg.output_dir.join("infer"));
            commands::infer(&cfg, &ckpt, &image, &out, levels, log)
        }
        Command::Ablate => commands::ablate(&base.resolve(seed, common.out.as_deref())?, log),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut log = stdout.lock();
    match run(cli, &mut log) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = log.flush();
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
