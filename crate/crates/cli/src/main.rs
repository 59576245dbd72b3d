//! `jam`: train toy parents, fuse them, align, instruction-tune, sample and evaluate.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure. Errors
//! are reported on stderr as one JSON object per line.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "jam", version, about = "Toy-scale joint autoregressive mixed-modal models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration (defaults are used without one).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the command's random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    /// Training dataset, as `path` or `kind=path`. Repeatable.
    #[arg(long = "data", required = true)]
    data: Vec<String>,
    /// Validation dataset. Repeatable.
    #[arg(long = "val")]
    val: Vec<String>,
    /// Metrics CSV to write.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_tokens: Option<usize>,
    #[command(flatten)]
    bank: BankFlags,
}

#[derive(Args, Debug, Clone)]
struct BankFlags {
    /// Condition on documents retrieved from a memory bank.
    #[arg(long)]
    retrieval: bool,
    /// Bank embedding sidecar (from `build-bank`).
    #[arg(long, requires = "retrieval")]
    bank: Option<PathBuf>,
    /// Dataset the bank was built from.
    #[arg(long, requires = "retrieval")]
    bank_data: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FuseKind {
    Uniform,
    #[value(alias = "width")]
    WidthCopy,
    WidthAverage,
    Cross,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Filter {
    All,
    Text,
    Image,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum CheckKind {
    Dense,
    Cross,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (JSONL).
    Synth {
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 512)]
        size: usize,
        #[arg(long)]
        world_seed: Option<u64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write a freshly initialized dense checkpoint.
    Init {
        /// All-zero weights, which give uniform predictions.
        #[arg(long)]
        zero: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a dense parent from scratch (or from `--init`).
    TrainParent {
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Combine two parents into one model.
    Fuse {
        /// Text parent (the LLM tower for cross fusion).
        #[arg(long)]
        a: PathBuf,
        /// Image-text parent.
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_enum)]
        kind: FuseKind,
        /// Cross blocks after every `every`-th layer.
        #[arg(long)]
        every: Option<usize>,
        /// Adds feed-forward sublayers to the cross blocks.
        #[arg(long)]
        cross_ffn: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Continued pretraining on text and caption data; keeps the best checkpoint.
    Align {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Instruction tuning; writes one checkpoint per epoch.
    Instruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 15)]
        epochs: usize,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Generate interleaved text and images.
    Sample {
        #[arg(long)]
        model: PathBuf,
        /// Prompt in the report format (`text: ...` lines).
        #[arg(long, conflicts_with = "prompt_tokens")]
        prompt: Option<String>,
        /// Prompt as comma-separated token ids.
        #[arg(long, value_delimiter = ',')]
        prompt_tokens: Option<Vec<usize>>,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long)]
        cfg: Option<f64>,
        #[arg(long)]
        max_tokens: Option<usize>,
        #[arg(long)]
        max_images: Option<usize>,
        #[command(flatten)]
        bank: BankFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Teacher-forced perplexity.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "data", required = true)]
        data: Vec<String>,
        #[arg(long, value_enum)]
        filter: Option<Filter>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the fusion and instruction-tuning ablations.
    Ablate {
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare model gradients with central finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value = "dense")]
        model: CheckKind,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 16)]
        d_model: usize,
        #[arg(long, default_value_t = 10)]
        tokens: usize,
        #[arg(long, default_value_t = 0.1)]
        init_std: f64,
        #[arg(long, default_value_t = 1e-6)]
        threshold: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Embed a dataset into a retrieval bank sidecar.
    BuildBank {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// What went wrong, which decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

pub trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn report(kind: &str, err: &anyhow::Error) {
    let line = json!({ "error": kind, "message": format!("{err:#}") });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("usage", &anyhow::anyhow!(e.render().to_string().trim().to_string()));
            return ExitCode::from(1);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            report("usage", &e);
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            report("runtime", &e);
            ExitCode::from(2)
        }
    }
}
