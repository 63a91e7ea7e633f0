use thiserror::Error;

/// Errors raised across the crate.
///
/// The variants follow the failure classes the engine and CLI must tell
/// apart: a budget that cannot be met is *not* an error (see
/// [`crate::engine::Outcome::Failure`]), while a bad configuration is.
#[derive(Debug, Error)]
pub enum KmrError {
    /// Shapes or dimensions do not line up.
    #[error("structural error: {0}")]
    Structural(String),
    /// A value lies outside the domain an operation accepts.
    #[error("domain error: {0}")]
    Domain(String),
    /// Invalid registration, config file, or policy output.
    #[error("configuration error: {0}")]
    Config(String),
    /// A rule failed while transforming a model.
    #[error("rule `{rule}` failed: {reason}")]
    Rule { rule: String, reason: String },
    /// A persisted artifact (checkpoint, run log) could not be decoded.
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = KmrError> = std::result::Result<T, E>;

pub(crate) fn structural(msg: impl Into<String>) -> KmrError {
    KmrError::Structural(msg.into())
}

pub(crate) fn domain(msg: impl Into<String>) -> KmrError {
    KmrError::Domain(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> KmrError {
    KmrError::Config(msg.into())
}
