use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod commands;
mod plot;

/// Low-rank adaptation of vision transformers for image quality,
/// memorability and emotion prediction.
#[derive(Debug, Parser)]
#[command(name = "perceptlab", version)]
struct Cli {
    /// More log output; repeat for debug messages.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Serialize)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set lora.rank=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum TaskArg {
    Iqa,
    Memorability,
    Emotion,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, Default)]
#[serde(rename_all = "snake_case")]
enum ScopeArg {
    #[default]
    ClsRow,
    FullMatrix,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Write the train/val/test manifests of every split repeat.
    PrepareSplits {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Sweep learning rates and train each configured dataset on its own.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Joint training over all configured datasets, then per-dataset heads.
    TrainMulti {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Metrics of a checkpoint on a manifest of its own task.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Restrict a split-tagged manifest to one part.
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Correlation of a checkpoint's predictions with another dataset.
    CrossEvaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Task of the manifest's labels.
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Class count for an emotion manifest; the checkpoint's by default.
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Predict images with a checkpoint; CSV on standard output.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write `predictions.csv` and a command snapshot here.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Print every view's output to standard error.
        #[arg(long)]
        per_view: bool,
        images: Vec<PathBuf>,
    },
    /// Rank attention heads by the prediction change their ablation causes.
    AnalyzeHeads {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Use only the first N images of the manifest.
        #[arg(long)]
        limit: Option<usize>,
        /// Images listed per top head.
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        /// Heads for which the most affected images are listed.
        #[arg(long, default_value_t = 3)]
        top_heads: usize,
        #[arg(long, value_enum, default_value = "cls-row")]
        scope: ScopeArg,
        /// Spread the uniform attention over patch tokens only.
        #[arg(long)]
        exclude_cls: bool,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Heatmaps of fine-tuned minus pretrained CLS attention.
    RenderAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Head as LAYER:HEAD. Repeatable.
        #[arg(long = "head", value_name = "LAYER:HEAD")]
        heads: Vec<String>,
        /// Take the most important heads from an `analyze-heads` table.
        #[arg(long)]
        importance: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        top_heads: usize,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Trainable parameter counts of a configuration.
    Params {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Training curves and a predicted-versus-target scatter as SVG.
    Plot {
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

/// Failure of a command with its process exit code.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(perceptlab::Error),
}

impl From<perceptlab::Error> for CliError {
    fn from(e: perceptlab::Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => e.exit_code() as u8,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
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
    match commands::run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
