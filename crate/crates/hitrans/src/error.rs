//! Shared error type for the whole crate.
//!
//! Every fallible operation returns [`Result`]. Errors carry a short machine
//! `kind` (stable, used by the CLI's JSON error output) and a human message.

use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor/matrix dimension mismatch; message names the offending shapes.
    Shape(String),
    /// Out-of-range index (vocabulary id, class id, ...).
    Index(String),
    /// Invalid configuration value or combination.
    Config(String),
    /// An API contract was violated (non-scalar loss, missing speakers, ...).
    Contract(String),
    /// Sequence longer than the configured maximum.
    Length(String),
    /// More distinct speakers in a dialog than the model can represent.
    Capacity(String),
    /// Input file could not be parsed; message includes file and line.
    Parse(String),
    /// Corpus or label-set content is unusable as given.
    Data(String),
    /// Training diverged or was asked to do something impossible.
    Train(String),
    /// A metric is undefined on the given input (e.g. empty confusion matrix).
    Metric(String),
    /// Checkpoint file is corrupt, truncated, or from a different version.
    Checkpoint(String),
    /// Checkpoint and current inputs (labels, vocab, config) do not match.
    Incompatible(String),
    /// Command-line usage error.
    Cli(String),
    /// Underlying I/O failure.
    Io(String),
}

impl Error {
    /// Stable lowercase tag for machine consumption.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Index(_) => "index",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Length(_) => "length",
            Error::Capacity(_) => "capacity",
            Error::Parse(_) => "parse",
            Error::Data(_) => "data",
            Error::Train(_) => "train",
            Error::Metric(_) => "metric",
            Error::Checkpoint(_) => "checkpoint",
            Error::Incompatible(_) => "incompatible",
            Error::Cli(_) => "cli",
            Error::Io(_) => "io",
        }
    }

    /// Human-readable message without the kind prefix.
    pub fn message(&self) -> &str {
        match self {
            Error::Shape(m)
            | Error::Index(m)
            | Error::Config(m)
            | Error::Contract(m)
            | Error::Length(m)
            | Error::Capacity(m)
            | Error::Parse(m)
            | Error::Data(m)
            | Error::Train(m)
            | Error::Metric(m)
            | Error::Checkpoint(m)
            | Error::Incompatible(m)
            | Error::Cli(m)
            | Error::Io(m) => m,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind(), self.message())
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
