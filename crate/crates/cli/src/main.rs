use std::path::PathBuf;
use std::process::ExitCode;

use caw_cli::commands::{self, TrainOptions};
use caw_cli::{CliError, ExperimentConfig};
use caw_core::mask::MaskMode;
use caw_core::metrics::EvalPool;
use clap::{Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(
    name = "caw",
    version,
    about = "Concept-attention whitening experiments on synthetic concept images"
)]
struct Cli {
    /// JSON experiment config; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Concept-mask threshold.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    mask_mode: Option<MaskMode>,
    #[arg(long, global = true)]
    eval_pool: Option<EvalPool>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective configuration.
    Config,
    /// Generate a synthetic dataset into --out.
    GenData {
        /// Overrides data.num_samples.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Pretrain the concept net and train the CAW model.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from a model checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Mask directory laid out like the dataset, for --mask-mode lesion.
        #[arg(long)]
        lesion_masks: Option<PathBuf>,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Retrain per threshold and tabulate disease and concept AUC.
    SweepThreshold {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated thresholds; defaults to eval.gammas.
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
    },
    /// Permutation concept importance on the test split.
    Importance {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Concept scores and activation maps for one PPM image.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(g) = cli.gamma {
        cfg.train.gamma = g;
    }
    if let Some(m) = cli.mask_mode {
        cfg.train.mask_mode = m;
    }
    if let Some(p) = cli.eval_pool {
        cfg.eval.pool = p;
    }
    match &cli.command {
        Command::GenData { n: Some(n) } => cfg.data.num_samples = *n,
        Command::Train {
            epochs: Some(e), ..
        } => cfg.train.epochs = *e,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print<S: Serialize>(value: &S) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("summary serializes")
    );
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = effective_config(&cli)?;
    let out = &cli.out;
    match cli.command {
        Command::Config => println!("{}", cfg.to_json()),
        Command::GenData { .. } => print(&commands::gen_data(&cfg, out)?),
        Command::Train {
            data,
            resume,
            lesion_masks,
            ..
        } => {
            let s = commands::train(
                &cfg,
                &data,
                out,
                &TrainOptions {
                    resume,
                    lesion: lesion_masks,
                },
            )?;
            print(&serde_json::json!({
                "concept_checkpoint": s.concept_checkpoint,
                "model_checkpoint": s.model_checkpoint,
                "log": s.log,
                "epochs_done": s.epochs_done,
                "steps_done": s.steps_done,
                "final_loss": s.final_loss,
                "config_hash": cfg.hash(),
            }));
        }
        Command::Eval { data, checkpoint } => {
            print(&commands::eval(&cfg, &data, &checkpoint, out)?)
        }
        Command::SweepThreshold { data, gammas } => {
            let gammas = gammas.unwrap_or_else(|| cfg.eval.gammas.clone());
            print(&commands::sweep_threshold(&cfg, &data, out, &gammas)?);
        }
        Command::Importance { data, checkpoint } => {
            print(&commands::importance(&cfg, &data, &checkpoint, out)?)
        }
        Command::Explain { checkpoint, image } => {
            print(&commands::explain(&checkpoint, &image, out)?)
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
