use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GldError>;

#[derive(Debug, Error)]
pub enum GldError {
    #[error(transparent)]
    Core(#[from] gld_core::Error),

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("empty dataset at {0}")]
    EmptyDataset(PathBuf),

    #[error("corrupt manifest entry for {scene_id}: {reason}")]
    CorruptManifest { scene_id: String, reason: String },

    #[error("missing {0}")]
    MissingAsset(String),

    #[error("fingerprint mismatch for {what}: expected {expected}, found {found}")]
    FingerprintMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at step {step}: {details}")]
    NonFiniteLoss { step: usize, details: String },

    #[error("latent features already normalized")]
    AlreadyNormalized,

    #[error("latent features are not normalized")]
    NotNormalized,
}

impl GldError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Self {
        Self::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Stable short identifier used in machine-readable CLI errors.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Core(_) => "core",
            Self::Tensor(_) => "tensor",
            Self::Io { .. } => "io",
            Self::Format { .. } => "format",
            Self::EmptyDataset(_) => "empty-dataset",
            Self::CorruptManifest { .. } => "corrupt-manifest",
            Self::MissingAsset(_) => "missing-asset",
            Self::FingerprintMismatch { .. } => "fingerprint-mismatch",
            Self::Config(_) => "config",
            Self::InvalidArgument(_) => "invalid-argument",
            Self::NonFiniteLoss { .. } => "non-finite-loss",
            Self::AlreadyNormalized | Self::NotNormalized => "latent-state",
        }
    }
}
