//! `rephrase`: data generation, training, decoding and evaluation for
//! message-content rephrasing.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 when a run
//! fails after it started.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Invalid(rephrase::Error),
    #[error(transparent)]
    Runtime(anyhow::Error),
}

impl From<rephrase::Error> for CliError {
    fn from(e: rephrase::Error) -> Self {
        use rephrase::Error as E;
        match e {
            E::InvalidArgument(_)
            | E::Parse { .. }
            | E::Validation { .. }
            | E::InvalidUtterance(_)
            | E::MissingPredictions(_)
            | E::Empty(_)
            | E::NotCovered(_) => CliError::Invalid(e),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "rephrase", version, about = "Rephrase message content spans with seq2seq and edit-tagging models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; the resolved config is written here first.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Column layout when `--data` is a TSV file (0-based indices).
#[derive(Args, Debug, Clone, Default)]
pub struct TsvArgs {
    #[arg(long)]
    tsv_id: Option<usize>,
    #[arg(long)]
    tsv_query: Option<usize>,
    #[arg(long)]
    tsv_class: Option<usize>,
    /// Comma-separated rephrase columns.
    #[arg(long, value_delimiter = ',')]
    tsv_rephrases: Vec<usize>,
    #[arg(long)]
    tsv_span_start: Option<usize>,
    #[arg(long)]
    tsv_span_end: Option<usize>,
    #[arg(long)]
    tsv_header: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    PointerLstm,
    MiniTransformer,
    Tagger,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset to <out>/data.jsonl.
    GenData {
        #[arg(long)]
        n: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Print length, overlap and change-category statistics.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tsv: TsvArgs,
    },
    /// Train a model from scratch and save it to <out>/model.
    Train {
        #[arg(long, value_enum)]
        arch: Arch,
        #[arg(long)]
        data: PathBuf,
        /// Validation set for checkpoint selection and early stopping.
        #[arg(long)]
        valid: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tsv: TsvArgs,
    },
    /// Denoising pretraining of the mini transformer.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tsv: TsvArgs,
    },
    /// Graft a copy head onto a pretrained transformer and fine-tune with the copy loss.
    FinetuneCopy {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tsv: TsvArgs,
    },
    /// Sequence-level distillation from a saved teacher into a fresh student.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        /// Config for the student; takes the place of --config.
        #[arg(long)]
        student_config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "pointer-lstm")]
        student_arch: Arch,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Teacher beam width (1 decodes greedily).
        #[arg(long)]
        beam: Option<usize>,
        /// Continue on the gold targets after distillation.
        #[arg(long)]
        ft_gold: Option<bool>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tsv: TsvArgs,
    },
    /// Grid search over the copy-loss weight and threshold.
    Gridsearch {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        /// Pretrained transformer to fine-tune in every cell; a fresh one otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tsv: TsvArgs,
    },
    /// Write predictions as `id<TAB>tokens` to <out>/predictions.tsv, or stdout.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `greedy` or `beam:K`.
        #[arg(long)]
        decode: Option<String>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tsv: TsvArgs,
    },
    /// Score a prediction file: EM, EM_any, BLEU, SARI and copy errors.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tsv: TsvArgs,
    },
    /// Extract the phrase vocabulary and report its coverage curve.
    Phrases {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        top_k: usize,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tsv: TsvArgs,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
