use alloc::string::String;

/// Errors produced by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("inner join across hosts produced no rows")]
    EmptyJoin,
    #[error("host `{host}` is missing column `{column}`")]
    MissingColumn { host: String, column: String },
    #[error("label table misaligned: {0}")]
    LabelMisalignment(String),
    #[error("window scores leave timestep {0} uncovered")]
    CoverageGap(usize),
    #[error("view `{0}` is disabled in this configuration")]
    ViewDisabled(&'static str),
    #[error("non-finite loss in `{part}` at step {step}")]
    NonFiniteLoss { part: &'static str, step: usize },
    #[error("configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::Error::InvalidArgument(alloc::format!($($arg)*)) };
}
macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::ShapeMismatch(alloc::format!($($arg)*)) };
}
pub(crate) use invalid;
pub(crate) use shape_err;
