use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("`{name}` = {value} is outside [{min}, {max}]")]
    OutOfRange {
        name: String,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("invalid device layout: {0}")]
    InvalidLayout(String),

    #[error("non-finite rate constant `{0}`")]
    NonFiniteRate(String),

    #[error("transient not settled: the final 20% window still drifts; extend the trace by at least {extra_s:.3} s")]
    NotSettled { extra_s: f64 },

    #[error("unknown NV identifier `{0}`")]
    UnknownNv(String),

    #[error("unknown protocol kind `{0}`")]
    UnknownProtocol(String),

    #[error("sequence rejected: {0}")]
    InvalidSequence(String),

    #[error("event {index}: {source}")]
    AtEvent {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("malformed data file: {0}")]
    Parse(String),

    #[error("configuration error:\n{0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn at_event(index: usize, source: Error) -> Self {
        Error::AtEvent {
            index,
            source: Box::new(source),
        }
    }
}

/// Rejects NaN/inf and values outside `[min, max]`.
pub(crate) fn check_range(name: &str, value: f64, min: f64, max: f64) -> Result<()> {
    if value.is_finite() && value >= min && value <= max {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name: name.to_string(),
            value,
            min,
            max,
        })
    }
}
