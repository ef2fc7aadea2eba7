use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value in input (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("input too short: {got} frames, need at least {min}")]
    TooShort { got: usize, min: usize },

    #[error("CTC alignment infeasible: {labels} labels ({repeats} adjacent repeats) in {frames} frames")]
    CtcInfeasible {
        labels: usize,
        repeats: usize,
        frames: usize,
    },

    #[error("enumeration too large: {0} paths")]
    TooLarge(u128),

    #[error("function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: u64, what: String },

    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("features for utterance {utt_id} unavailable: {msg}")]
    MissingFeatures { utt_id: String, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake-case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::TooShort { .. } => "too_short",
            Error::CtcInfeasible { .. } => "ctc_infeasible",
            Error::TooLarge(_) => "too_large",
            Error::NonDeterministic { .. } => "non_deterministic",
            Error::Diverged { .. } => "diverged",
            Error::Manifest { .. } => "manifest",
            Error::MissingFeatures { .. } => "missing_features",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
