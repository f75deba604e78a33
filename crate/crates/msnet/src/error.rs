//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shape mismatch; the message names the operation and the
    /// offending axes.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// `backward` was called on a non-scalar node.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// Batch normalization over fewer than two elements per channel.
    #[error("degenerate batch: need at least 2 elements per channel, got {count}")]
    DegenerateBatch { count: usize },

    /// A site id outside `1..=num_sites`.
    #[error("unknown site {site}: model has {num_sites} site(s)")]
    UnknownSite { site: usize, num_sites: usize },

    /// Auxiliary branches were requested from a stripped (deployment) model.
    #[error("model has no auxiliary branches (stripped for deployment)")]
    NoAuxBranches,

    /// Invalid architecture configuration.
    #[error("invalid architecture: {0}")]
    Arch(String),

    /// Invalid run/training configuration, including unknown config keys.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Checkpoint file is corrupt or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset files are corrupt or inconsistent with their manifest.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Average symmetric distance is undefined for empty masks.
    #[error("surface distance undefined: {0} mask has no foreground")]
    EmptyMask(&'static str),

    /// An objective was given the wrong number of per-site terms.
    #[error("expected {expected} per-site terms, got {got}")]
    MissingSiteTerm { expected: usize, got: usize },

    /// A loss weight outside its valid range.
    #[error("invalid loss weight: {0}")]
    LossWeight(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Exit code contract: 1 for validation errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Arch(_) | Error::LossWeight(_) => 1,
            _ => 2,
        }
    }
}
