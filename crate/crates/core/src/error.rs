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

    #[error("non-finite loss term `{term}`")]
    NonFiniteLoss { term: &'static str },

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("{segment} segment too short: {len} steps, need at least {required}")]
    SegmentTooShort {
        segment: &'static str,
        len: usize,
        required: usize,
    },

    #[error("series too short: {len} steps, need at least {required}")]
    SeriesTooShort { len: usize, required: usize },

    #[error("invalid series: {0}")]
    InvalidSeries(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty validation set")]
    EmptyValidation,

    #[error("need at least {required} samples, got {got}")]
    TooFewSamples { required: usize, got: usize },

    #[error("invalid quantile levels: {0}")]
    InvalidQuantiles(String),

    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),

    #[error("invalid synthetic spec: {0}")]
    InvalidSynthetic(String),

    #[error("analytic forecast distribution is only available for ar1 series")]
    UnsupportedKind,
}

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
