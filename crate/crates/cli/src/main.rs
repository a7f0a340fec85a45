//! `deal`: dataset generation, explanation-regularized training, evaluation,
//! heatmap export, and the ablation sweep.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deal_core::explain::Backend;

use config::RunConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "deal", version, about = "Disentangled and localized concept explanations for a miniature vision-language model")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, model initialization, and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset root written by `datagen`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Concept file (default: concepts.json under the dataset root).
    #[arg(long)]
    concepts: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Weight of the disentanglement term.
    #[arg(long)]
    lambda: Option<f64>,
    /// Weight of the localization term.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Explanation backend used inside the training objective.
    #[arg(long)]
    train_backend: Option<Backend>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic train and test splits and the concept file.
    Datagen {
        #[arg(long)]
        train_per_category: Option<usize>,
        #[arg(long)]
        test_per_category: Option<usize>,
    },
    /// Train a model; writes a checkpoint, the step log, and a validation report.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Backend for the validation report.
        #[arg(long)]
        backend: Option<Backend>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        backend: Option<Backend>,
        /// Heatmap binarization threshold for mIoU.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Export concept heatmaps of test samples as PGM and CSV files.
    Explain {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        backend: Option<Backend>,
        /// Sample index within the split; repeatable.
        #[arg(long = "sample")]
        samples: Vec<usize>,
        /// Concept to explain; repeatable. Default: all concepts of the sample.
        #[arg(long = "concept")]
        concept: Vec<String>,
    },
    /// Train and evaluate the four ablation variants.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        backend: Option<Backend>,
    },
}

fn apply_data(cfg: &mut RunConfig, a: DataArgs) {
    if a.data.is_some() {
        cfg.data.dir = a.data;
    }
    if a.concepts.is_some() {
        cfg.data.concepts = a.concepts;
    }
}

fn apply_train(cfg: &mut RunConfig, a: TrainArgs) {
    let TrainArgs {
        lambda,
        gamma,
        epochs,
        learning_rate,
        batch_size,
        train_backend,
    } = a;
    cfg.deal.lambda = lambda.unwrap_or(cfg.deal.lambda);
    cfg.deal.gamma = gamma.unwrap_or(cfg.deal.gamma);
    cfg.deal.backend = train_backend.unwrap_or(cfg.deal.backend);
    cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
    cfg.train.learning_rate = learning_rate.unwrap_or(cfg.train.learning_rate);
    cfg.train.batch_size = batch_size.unwrap_or(cfg.train.batch_size);
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.data.seed = seed;
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    if cli.common.out.is_some() {
        cfg.out = cli.common.out;
    }
    match cli.command {
        Command::Datagen {
            train_per_category,
            test_per_category,
        } => {
            cfg.data.train_per_category = train_per_category.unwrap_or(cfg.data.train_per_category);
            cfg.data.test_per_category = test_per_category.unwrap_or(cfg.data.test_per_category);
            commands::datagen(&cfg)
        }
        Command::Train { data, train, backend } => {
            apply_data(&mut cfg, data);
            apply_train(&mut cfg, train);
            cfg.eval.backend = backend.unwrap_or(cfg.eval.backend);
            commands::train_cmd(&cfg)
        }
        Command::Eval {
            data,
            checkpoint,
            backend,
            threshold,
        } => {
            apply_data(&mut cfg, data);
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            cfg.eval.backend = backend.unwrap_or(cfg.eval.backend);
            cfg.eval.threshold = threshold.unwrap_or(cfg.eval.threshold);
            commands::eval_cmd(&cfg)
        }
        Command::Explain {
            data,
            checkpoint,
            backend,
            samples,
            concept,
        } => {
            apply_data(&mut cfg, data);
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            cfg.eval.backend = backend.unwrap_or(cfg.eval.backend);
            if !samples.is_empty() {
                cfg.explain.samples = samples;
            }
            if !concept.is_empty() {
                cfg.explain.concepts = concept;
            }
            commands::explain_cmd(&cfg)
        }
        Command::Ablate { data, train, backend } => {
            apply_data(&mut cfg, data);
            apply_train(&mut cfg, train);
            cfg.eval.backend = backend.unwrap_or(cfg.eval.backend);
            commands::ablate_cmd(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
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
            ExitCode::from(e.exit_code())
        }
    }
}
