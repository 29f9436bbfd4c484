//! `stsn`: train, predict, evaluate and ablate joint entity/relation models.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "stsn", version, about = "Joint entity and relation extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus `--set key=value` overrides. `STSN_SEED` sits between
/// the two: it beats the file, explicit overrides beat it.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, log, config and vocabularies.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        train: PathBuf,
        /// Development corpus; enables best-epoch selection by RE+ F1.
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a trained model over a corpus.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score predictions against gold annotations.
    Evaluate {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum)]
        breakdown: Option<Breakdown>,
        #[arg(long, value_enum, default_value_t = MatchingArg::Exact)]
        matching: MatchingArg,
        /// Directory for metrics.json and metrics.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score a grid of layer counts and component ablations.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        train: PathBuf,
        /// Corpus the variants are scored on; the training corpus if omitted.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Comma-separated subset of full, no_label_embedding, no_erla, no_stack.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<commands::Variant>,
        /// Comma-separated layer counts. Defaults to 1..6 for the full grid,
        /// otherwise to the configured layer count.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check that a corpus loads, encodes and fits the configured limits.
    ValidateData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Breakdown {
    EntityLength,
    SentenceLength,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MatchingArg {
    Exact,
    Head,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, train, dev, out } => commands::train(&config, &train, dev.as_deref(), &out),
        Command::Predict {
            checkpoint,
            input,
            output,
        } => commands::predict(&checkpoint, &input, &output),
        Command::Evaluate {
            gold,
            pred,
            breakdown,
            matching,
            out,
        } => commands::evaluate(&gold, &pred, breakdown, matching, out.as_deref()),
        Command::Ablate {
            config,
            train,
            eval,
            variants,
            layers,
            out,
        } => commands::ablate(&config, &train, eval.as_deref(), &variants, &layers, out.as_deref()),
        Command::ValidateData { config, input } => commands::validate_data(&config, &input),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.render().to_string().trim_end().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
