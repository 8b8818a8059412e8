//! Crate-wide error type.
//!
//! Errors are grouped by what the caller can do about them: `Dimension` and
//! `Argument` are programming/configuration mistakes at an API boundary,
//! `Config` covers run configuration files and presets, `Data` covers dataset
//! files and split construction, and `Numeric` covers runtime failures such as
//! a non-finite training loss. The CLI maps these groups onto exit codes.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Matrix shapes do not line up for the requested operation.
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dimension {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// An argument is outside its documented domain (negative noise scale,
    /// negative penalty weight, zero batch size, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Bad run configuration: unknown variant name, unparseable config file,
    /// contradictory settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset problems: malformed IDX payloads, truncated files, or a split
    /// request the data cannot satisfy.
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure at runtime, e.g. a loss component turned NaN/inf.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(op: &'static str, lhs: impl std::fmt::Display, rhs: impl std::fmt::Display) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_string(),
            rhs: rhs.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
