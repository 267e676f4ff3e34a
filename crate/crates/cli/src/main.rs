//! `captionret`: ingest caption corpora, build indexes, query and evaluate.
//!
//! Exit codes: 0 on success, 2 for invalid input or missing prerequisites,
//! 3 when an embedding or captioning service fails. Errors are printed to
//! stderr as one JSON object.

mod commands;
mod config;

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use captionret::backends::{BackendError, CaptionError};
use captionret::corpus::CorpusError;
use captionret::embedding::EmbedError;
use captionret::evalharness::EvalError;
use captionret::index::IndexError;
use captionret::retrieval::RetrievalError;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "captionret",
    version,
    about = "Caption-based image retrieval pipelines"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    T2i,
    I2t,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    T2i,
    I2t,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, validate and deduplicate a corpus file.
    Ingest {
        /// Raw corpus; defaults to the configured corpus.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Print corpus statistics.
    Stats {
        #[arg(long)]
        json: bool,
    },
    /// Embed every caption variant and write the index file.
    Index,
    /// Run one query against the index.
    Query {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Query text (t2i).
        #[arg(long, required_if_eq("mode", "t2i"))]
        text: Option<String>,
        /// Query image (i2t).
        #[arg(long, required_if_eq("mode", "i2t"))]
        image: Option<PathBuf>,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
        /// Print the full outcome record as JSON instead of result lines.
        #[arg(long)]
        json: bool,
    },
    /// Compute Recall@k and mean recall against a ground-truth file.
    Eval {
        #[arg(long, value_enum, default_value = "both")]
        direction: DirectionArg,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        image_root: Option<PathBuf>,
        /// Row label in the results table.
        #[arg(long, default_value = "captionret")]
        method: String,
    },
}

#[derive(Debug, Serialize)]
pub struct CliError {
    #[serde(skip)]
    pub code: u8,
    pub error: &'static str,
    pub message: String,
}

impl CliError {
    pub fn input(kind: &'static str, message: impl Display) -> Self {
        Self {
            code: 2,
            error: kind,
            message: message.to_string(),
        }
    }

    pub fn backend(message: impl Display) -> Self {
        Self {
            code: 3,
            error: "backend",
            message: message.to_string(),
        }
    }

    pub fn missing(path: &Path, e: impl Display) -> Self {
        Self::input("missing_file", format!("{}: {e}", path.display()))
    }

    pub fn io(path: &Path, e: impl Display) -> Self {
        Self::input("io", format!("{}: {e}", path.display()))
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let kind = match e {
            CorpusError::FileNotFound(_) => "missing_file",
            CorpusError::MalformedRecord { .. } => "malformed_record",
            CorpusError::DuplicateImageId(_) => "duplicate_image_id",
            _ => "corpus",
        };
        Self::input(kind, e)
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::BackendFailure { .. } => Self::backend(e),
            _ => Self::input("embedding", e),
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Config(_) => Self::input("config", e),
            _ => Self::backend(e),
        }
    }
}

impl From<CaptionError> for CliError {
    fn from(e: CaptionError) -> Self {
        match e {
            CaptionError::Backend(b) => b.into(),
            CaptionError::EmptyCaption => Self::backend(e),
            CaptionError::FileNotFound(_) => Self::input("missing_file", e),
            _ => Self::input("captioner", e),
        }
    }
}

impl From<IndexError> for CliError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::Embed(inner) => inner.into(),
            IndexError::NotFound(_) => Self::input("missing_file", e),
            IndexError::CorruptIndex(_) | IndexError::DimMismatch(_) => {
                Self::input("corrupt_index", e)
            }
            _ => Self::input("index", e),
        }
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Caption(c) => c.into(),
            RetrievalError::Embed(c) => c.into(),
            RetrievalError::Index(c) => c.into(),
            RetrievalError::FileNotFound(_) => Self::input("missing_file", e),
            RetrievalError::BackendMismatch { .. } => Self::input("backend_mismatch", e),
            RetrievalError::EmptyText => Self::input("query", e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Query { query_id, source } => {
                let mut inner = CliError::from(source);
                inner.message = format!("query {query_id}: {}", inner.message);
                inner
            }
            EvalError::MissingCaptioner => Self::input("missing_captioner", e),
            EvalError::Io(_) => Self::input("io", e),
            _ => Self::input("ground_truth", e),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&cli.overrides)?;
    match cli.command {
        Command::Ingest { input } => commands::ingest(&cfg, input.as_deref()),
        Command::Stats { json } => commands::stats(&cfg, json),
        Command::Index => commands::index(&cfg),
        Command::Query {
            mode,
            text,
            image,
            k,
            json,
        } => commands::query(&cfg, mode, text.as_deref(), image.as_deref(), k, json),
        Command::Eval {
            direction,
            ground_truth,
            image_root,
            method,
        } => commands::eval(&cfg, direction, ground_truth, image_root, &method),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e).expect("error serializes"));
            ExitCode::from(e.code)
        }
    }
}
