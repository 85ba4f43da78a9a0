use thiserror::Error;

/// Errors raised across the simulation and estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Zero padding shorter than the channel, so blocks would overlap.
    #[error("ISI condition violated: n_z = {n_z} is smaller than n_h = {n_h}")]
    IsiViolation { n_z: usize, n_h: usize },

    #[error("{field}: {reason}")]
    Range { field: &'static str, reason: String },

    #[error("offset range [{min}, {max}] exceeds the admissible ±{limit}")]
    OffsetRange { min: i64, max: i64, limit: i64 },

    #[error("unsupported QAM order {0}")]
    UnsupportedOrder(u32),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Every moment window is empty for this hypothesis.
    #[error("hypothesis d = {d} has no complete observation period")]
    EmptyWindow { d: i64 },

    #[error("weight at index {index} is not a usable variance ({value})")]
    DegenerateWeight { index: usize, value: f64 },

    #[error("energy window of {window} samples does not fit twice into {len} samples")]
    WindowTooLong { window: usize, len: usize },

    #[error("malformed sample dump: {0}")]
    Format(String),

    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn range(field: &'static str, reason: impl Into<String>) -> Error {
    Error::Range {
        field,
        reason: reason.into(),
    }
}
