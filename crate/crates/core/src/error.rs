//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("kernel `{0}` has no second derivative on its support")]
    UnsupportedKernel(&'static str),

    #[error("kernel `{0}` is not positive semidefinite and cannot be used in fixed-b mode")]
    NonPsdKernel(&'static str),

    #[error("unknown kernel name `{0}`")]
    UnknownKernel(String),

    #[error("invalid DGP specification: {0}")]
    InvalidSpec(String),

    #[error("u = {0} is a discontinuity point of the nuisance path")]
    BreakPoint(f64),

    #[error("dimension {got} exceeds the dense-computation cap {cap}")]
    TooLarge { got: usize, cap: usize },

    #[error("regressor matrix is rank deficient (min singular value {min_sv:e})")]
    RankDeficient { min_sv: f64 },

    #[error("index {index} out of range (limit {limit})")]
    OutOfRange { index: i64, limit: i64 },

    #[error("effective smoothing window holds {0} observations (need at least 8)")]
    DegenerateBandwidth(usize),

    #[error("estimated variance curve is identically zero")]
    DegenerateCurve,

    #[error("{got} draws supplied; at least {need} required")]
    TooFewDraws { got: usize, need: usize },

    #[error("bandwidth b = {b} violates the expansion bound b < {bound}")]
    BandwidthTooLarge { b: f64, bound: f64 },

    #[error("studentizing variance {0:e} is numerically zero")]
    DegenerateVariance(f64),

    #[error("middle matrix is singular or ill-conditioned (condition number {0:e})")]
    SingularMiddleMatrix(f64),

    #[error("simulated critical values requested without a draw set or curves")]
    MissingContext,

    #[error("{failures} of {reps} replications failed (more than 1%)")]
    TooManyFailures { failures: usize, reps: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnsupportedKernel(_) => "UnsupportedKernel",
            Error::NonPsdKernel(_) => "NonPsdKernel",
            Error::UnknownKernel(_) => "UnknownKernel",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::BreakPoint(_) => "BreakPoint",
            Error::TooLarge { .. } => "TooLarge",
            Error::RankDeficient { .. } => "RankDeficient",
            Error::OutOfRange { .. } => "OutOfRange",
            Error::DegenerateBandwidth(_) => "DegenerateBandwidth",
            Error::DegenerateCurve => "DegenerateCurve",
            Error::TooFewDraws { .. } => "TooFewDraws",
            Error::BandwidthTooLarge { .. } => "BandwidthTooLarge",
            Error::DegenerateVariance(_) => "DegenerateVariance",
            Error::SingularMiddleMatrix(_) => "SingularMiddleMatrix",
            Error::MissingContext => "MissingContext",
            Error::TooManyFailures { .. } => "TooManyFailures",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
        }
    }

    /// Process exit code: 2 for input/data problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::RankDeficient { .. }
            | Error::DegenerateBandwidth(_)
            | Error::DegenerateCurve
            | Error::DegenerateVariance(_)
            | Error::SingularMiddleMatrix(_)
            | Error::BandwidthTooLarge { .. }
            | Error::TooLarge { .. }
            | Error::TooManyFailures { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
