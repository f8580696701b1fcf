use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("{path}: unsupported orientation: {detail}")]
    UnsupportedOrientation { path: PathBuf, detail: String },
    #[error("{path}: truncated payload: expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Core(#[from] vilu_core::Error),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("{path}: {detail}")]
    Image { path: PathBuf, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit status: 2 usage, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> u8 {
        use vilu_core::Error as C;
        match self {
            Error::Usage(_) => 2,
            Error::Core(C::Config(_)) => 2,
            Error::GradCheck(_) => 4,
            Error::Core(C::NonFinite { .. } | C::NonFiniteToken { .. } | C::NonFiniteGradient(_)) => 4,
            _ => 3,
        }
    }
}
