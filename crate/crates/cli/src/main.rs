//! `riskplan`: command-line driver for the data, annotation, embedding,
//! training and evaluation pipeline.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::Preset;
use error::{CliError, ErrorKind};

#[derive(Parser, Debug)]
#[command(name = "riskplan", version, about = "Risk-aware trajectory planning pipeline")]
pub struct Cli {
    /// Root of the artifact tree (dataset/, annotations/, embeddings/, runs/, eval/, ablation/).
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// JSON run configuration; flags take precedence over its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replace existing outputs instead of failing.
    #[arg(long, global = true)]
    pub overwrite: bool,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scenario dataset and its train/val/test split.
    GenerateData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Annotate every record with the structured long-tail fields.
    Annotate {
        #[arg(long, value_enum, default_value = "mock")]
        backend: Backend,
    },
    /// Embed the annotations into scene and planning vectors.
    Embed {
        #[arg(long, value_enum, default_value = "mock")]
        backend: Backend,
        /// Embedding width for the mock encoder.
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Train a model into runs/<name>.
    Train {
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        ablation: AblationArgs,
        /// Run directory name under runs/; defaults to the ablation name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Evaluate a checkpoint and write report.json, report.txt and plots.
    Eval {
        /// Run under runs/ whose best checkpoint is evaluated.
        #[arg(long, default_value = "base")]
        run: String,
        /// Explicit checkpoint path; overrides --run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Output directory; defaults to eval/<run>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate base, no_instruction, no_intent and no_state.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Output directory; defaults to ablation/.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render tables and plots from existing report.json files.
    Report {
        /// Directory holding report.json or subdirectories that do; defaults to eval/.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate after warmup.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_start_lr: Option<f64>,
    #[arg(long)]
    pub min_lr: Option<f64>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

#[derive(Args, Debug, Clone, Copy, Default)]
pub struct AblationArgs {
    #[arg(long)]
    pub no_instruction: bool,
    #[arg(long)]
    pub no_intent: bool,
    #[arg(long)]
    pub no_state: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    Mock,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

fn command_name(argv: &[String]) -> String {
    const NAMES: [&str; 7] = ["generate-data", "annotate", "embed", "train", "eval", "ablate", "report"];
    argv.iter()
        .skip(1)
        .find(|a| NAMES.contains(&a.as_str()))
        .cloned()
        .unwrap_or_else(|| "riskplan".into())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let name = command_name(&argv);
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::from(if e.kind() == K::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 });
            }
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            let err = CliError::new(ErrorKind::Usage, first);
            eprintln!("{}", err.to_json_line(&name));
            return ExitCode::from(err.kind.exit_code() as u8);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_json_line(&name));
            ExitCode::from(err.kind.exit_code() as u8)
        }
    }
}
