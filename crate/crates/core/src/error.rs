use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown symbol {glyph:?} at position {position}")]
    UnknownSymbol { glyph: String, position: usize },
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("empty sequence")]
    SequenceTooShort,
    #[error("sequence length {len} differs from the fixed length {expected}")]
    WrongLength { len: usize, expected: usize },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("proposal {index} carries predictor-made labels")]
    UnlabeledProposal { index: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
    #[error("prefix of length {len} leaves no room under max_len {max_len}")]
    PrefixTooLong { len: usize, max_len: usize },
    #[error("label {0} is not valid for a binary head")]
    InvalidLabel(f64),
    #[error("non-finite gradient on chain {chain}")]
    NonFiniteGradient { chain: usize, z0: Vec<f64> },
    #[error("empty batch")]
    EmptyBatch,
    #[error("top-N of {n} requested from a buffer of {len}")]
    NTooLarge { n: usize, len: usize },
    #[error("oracle budget exhausted after {used} queries")]
    BudgetExhausted { used: u64 },
    #[error("search space of {size} sequences is too large to tabulate")]
    SpaceTooLarge { size: f64 },
    #[error("oracle range unknown; provide an explicit range estimate")]
    UnknownRange,
    #[error("oracles disagree on vocabulary")]
    VocabMismatch,
    #[error("need {k} unique sequences, have {have}")]
    NotEnoughUnique { k: usize, have: usize },
    #[error("empty query history")]
    EmptyHistory,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used for the CLI's error JSON and FFI status codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnknownSymbol { .. } => "unknown_symbol",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::SequenceTooShort => "sequence_too_short",
            Error::WrongLength { .. } => "wrong_length",
            Error::Parse { .. } => "parse_error",
            Error::UnlabeledProposal { .. } => "unlabeled_proposal",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::PrefixTooLong { .. } => "prefix_too_long",
            Error::InvalidLabel(_) => "invalid_label",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::EmptyBatch => "empty_batch",
            Error::NTooLarge { .. } => "n_too_large",
            Error::BudgetExhausted { .. } => "budget_exhausted",
            Error::SpaceTooLarge { .. } => "space_too_large",
            Error::UnknownRange => "unknown_range",
            Error::VocabMismatch => "vocab_mismatch",
            Error::NotEnoughUnique { .. } => "not_enough_unique",
            Error::EmptyHistory => "empty_history",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dims(expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
