use thiserror::Error;

/// Errors raised by the simulation, derivative and pricing layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A model or kernel violates one of the standing assumptions. `label`
    /// is the assumption tag, e.g. "(B1)" or "(K2)".
    #[error("{label} violated: {message}")]
    Assumption { label: &'static str, message: String },

    #[error("y = {y} outside the open band ({lower}, {upper}) at t = {t}")]
    OutOfBand { t: f64, y: f64, lower: f64, upper: f64 },

    #[error("integration failed on path {path_index} at step {step}: {reason}")]
    Integration { path_index: u64, step: usize, reason: String },

    #[error("no implied volatility: {0}")]
    NoSolution(String),

    #[error("skew undefined at tau = {tau}: {reason}")]
    SkewUndefined { tau: f64, reason: String },

    #[error("insufficient signal: {0}")]
    InsufficientSignal(String),

    #[error("limit undefined: {0}")]
    UndefinedLimit(String),

    #[error("extrapolation did not stabilise: {0}")]
    NonConvergence(String),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
