use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    PayloadSize { expected: usize, found: usize },
    #[error("unknown dtype `{0}`")]
    UnknownDtype(String),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("no orientation: response field is constant")]
    NoOrientation,
    #[error("label `{0}` is empty")]
    EmptyLabel(String),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("phantom geometry: {0}")]
    Phantom(String),
    #[error("seed rejected: {0}")]
    Seed(String),
    #[error("no path between `{0}` and `{1}`")]
    NoPath(String, String),
    #[error("mesh is not watertight: {0}")]
    NotWatertight(String),
    #[error("loft failed: {0}")]
    Loft(String),
    #[error("empty surface: no sign change on the sampling grid")]
    EmptySurface,
    #[error("contours are not coplanar")]
    NotCoplanar,
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    /// Stable snake-case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Header(_) => "header",
            Error::PayloadSize { .. } => "payload_size",
            Error::UnknownDtype(_) => "unknown_dtype",
            Error::InvalidVolume(_) => "invalid_volume",
            Error::Shape(_) => "shape",
            Error::InvalidInput(_) => "invalid_input",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::Divergence(_) => "divergence",
            Error::EmptyDataset => "empty_dataset",
            Error::NoOrientation => "no_orientation",
            Error::EmptyLabel(_) => "empty_label",
            Error::UnknownLabel(_) => "unknown_label",
            Error::Phantom(_) => "phantom",
            Error::Seed(_) => "seed",
            Error::NoPath(..) => "no_path",
            Error::NotWatertight(_) => "not_watertight",
            Error::Loft(_) => "loft",
            Error::EmptySurface => "empty_surface",
            Error::NotCoplanar => "not_coplanar",
            Error::Config(_) => "config",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
