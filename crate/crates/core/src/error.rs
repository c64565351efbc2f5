use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("loss must be a scalar, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("zero-norm embedding row {row}")]
    ZeroNorm { row: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("diseased segment `{patient_id}` in healthy-only training data")]
    DiseasedInHealthySet { patient_id: String },
    #[error("stage 2 received a labeled segment (`{patient_id}`); labels must be stripped")]
    LabelLeak { patient_id: String },
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("{0}")]
    Data(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Whether the error stems from a numeric failure (NaN/Inf, divergence).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::ZeroNorm { .. }
        )
    }
}
