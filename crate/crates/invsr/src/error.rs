//! Crate-wide error type and the exit-code contract used by the CLI.

use thiserror::Error;

/// Errors produced by the library.
///
/// Each variant maps onto the CLI exit-code contract:
/// configuration/validation problems exit 2, training divergence exits 3,
/// checkpoint problems exit 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension violations (wrong channel count, non-square image,
    /// mismatched batch sizes and the like).
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument values (bad alpha, unsupported factor, empty input...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Configuration file / key problems.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset manifest problems (missing file, malformed record, duplicate
    /// id, role/resolution mismatch).
    #[error("manifest error: {0}")]
    Manifest(String),

    /// Checkpoint load/save problems, including architecture mismatches.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A training or inversion loss became non-finite.
    #[error("divergence: {0}")]
    Divergence(String),

    /// Filesystem errors outside of checkpoints.
    #[error("io error: {0}")]
    Io(String),

    /// PNG encode/decode errors.
    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    /// Exit code for the CLI: 0 ok, 2 config/validation, 3 divergence,
    /// 4 checkpoint issues.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence(_) => 3,
            Error::Checkpoint(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
