use std::io;

use thiserror::Error;

use crate::policy::PolicyError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument was outside its documented domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A file did not follow the expected layout. `token` names the offending
    /// header token or pixel.
    #[error("format error at `{token}`: {message}")]
    Format { token: String, message: String },

    /// A metric or estimator is undefined for the given input (all-zero map,
    /// zero variance, and so on).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("introspection payload rejected: {0}")]
    Payload(String),

    #[error("perturbation failed: {0}")]
    Perturbation(String),

    /// A saliency run hit a non-finite action deviation and was abandoned.
    #[error("non-finite action deviation at timestep {timestep}, mask {mask}")]
    Poisoned { timestep: usize, mask: usize },

    #[error(transparent)]
    Policy(#[from] PolicyError),

    /// A policy query inside a saliency run failed.
    #[error("policy query failed at timestep {timestep}{}: {source}", .mask.map(|k| format!(", mask {k}")).unwrap_or_default())]
    Query {
        timestep: usize,
        mask: Option<usize>,
        #[source]
        source: PolicyError,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn format(token: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            token: token.into(),
            message: message.into(),
        }
    }
}
