use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {quantity} at coordinate {coordinate}")]
    Overflow { quantity: &'static str, coordinate: usize },

    #[error("finite-difference probe is non-finite at coordinate {coordinate} (offset {offset:e})")]
    NonFiniteProbe { coordinate: usize, offset: f64 },

    #[error("index {index} out of range (dimension {dim})")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("matrix is not positive definite (lambda_min estimate {lambda_min:e})")]
    NotPositiveDefinite { lambda_min: f64 },

    #[error("singular reference quadratic form (lambda_min {lambda_min:e}, lambda_max {lambda_max:e})")]
    Singular { lambda_min: f64, lambda_max: f64 },

    #[error("{0}")]
    InsufficientPoints(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable tag, used in CLI error documents.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::InvalidInstance(_) => "invalid_instance",
            Error::Config(_) => "config",
            Error::Overflow { .. } => "overflow",
            Error::NonFiniteProbe { .. } => "non_finite_probe",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::Singular { .. } => "singular",
            Error::InsufficientPoints(_) => "insufficient_points",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
