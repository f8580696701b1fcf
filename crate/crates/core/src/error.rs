use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite mLSTM intermediate at token {token}")]
    NonFiniteToken { token: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("contract error: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("label error: class {value} outside [0, {num_classes})")]
    Label { value: usize, num_classes: usize },
    #[error("resample error: {0}")]
    Resample(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
