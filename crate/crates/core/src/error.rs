use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Inputs violate a documented precondition.
    Input,
    /// Reading, writing or decoding a file failed.
    Io,
    /// A numerical step failed (conditioning, non-finite values).
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("pixel ({row}, {col}) is outside the {height}x{width} basis map")]
    Coordinate { row: usize, col: usize, height: usize, width: usize },

    #[error("invalid depth measurement {depth} at pixel ({row}, {col})")]
    Measurement { row: usize, col: usize, depth: f64 },

    #[error("duplicate measurement at pixel ({row}, {col})")]
    DuplicatePixel { row: usize, col: usize },

    #[error("value {0} is outside the domain of the log-depth transform")]
    Domain(f64),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension { what: &'static str, expected: usize, found: usize },

    #[error("invalid basis map: {0}")]
    InvalidBasis(String),

    #[error("underdetermined system: {n_obs} observations for {n_bases} bases")]
    Underdetermined { n_obs: usize, n_bases: usize },

    #[error("rank deficient normal equations (condition estimate {condition:.3e})")]
    Rank { condition: f64 },

    #[error("matrix is not positive definite after jitter up to {jitter:.3e}")]
    Conditioning { jitter: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("invalid hyperparameter {name} = {value}")]
    Hyperparameter { name: &'static str, value: f64 },

    #[error("need at least {needed} samples, have {count}")]
    InsufficientSamples { needed: usize, count: usize },

    #[error("invalid scale {0}")]
    Scale(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: bad magic bytes")]
    BadMagic { path: PathBuf },

    #[error("{path}: file truncated or wrong size (expected {expected} bytes, found {found})")]
    Truncated { path: PathBuf, expected: u64, found: u64 },

    #[error("{path}: header checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { path: PathBuf, stored: u32, computed: u32 },

    #[error("{path}: unsupported format version {version}")]
    Version { path: PathBuf, version: u32 },

    #[error("{path}: unknown dtype tag {tag}")]
    Dtype { path: PathBuf, tag: u8 },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            Coordinate { .. }
            | Measurement { .. }
            | DuplicatePixel { .. }
            | Domain(_)
            | Dimension { .. }
            | InvalidBasis(_)
            | Underdetermined { .. }
            | InvalidPrior(_)
            | Hyperparameter { .. }
            | InsufficientSamples { .. }
            | Scale(_)
            | Empty(_)
            | Config(_) => ErrorKind::Input,
            Rank { .. } | Conditioning { .. } | NonFinite(_) => ErrorKind::Numerical,
            Io { .. }
            | BadMagic { .. }
            | Truncated { .. }
            | Checksum { .. }
            | Version { .. }
            | Dtype { .. }
            | Parse { .. }
            | Json { .. } => ErrorKind::Io,
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension { what, expected, found })
    }
}
