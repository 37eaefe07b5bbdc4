//! Process exit codes and the mapping from errors to them.

use std::fmt;

use causal_probe::policy::PolicyError;
use causal_probe::Error;

pub const OK: u8 = 0;
pub const FAILURE: u8 = 1;
pub const VALIDATION: u8 = 2;
pub const TRANSPORT: u8 = 3;
pub const DEGENERATE: u8 = 4;

/// An error that already knows its exit code.
#[derive(Debug)]
pub struct Classified {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for Classified {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Classified {}

pub fn validation(message: impl Into<String>) -> anyhow::Error {
    Classified {
        code: VALIDATION,
        message: message.into(),
    }
    .into()
}

pub fn degenerate(message: impl Into<String>) -> anyhow::Error {
    Classified {
        code: DEGENERATE,
        message: message.into(),
    }
    .into()
}

fn policy_code(e: &PolicyError) -> u8 {
    match e {
        PolicyError::InvalidRequest(_) => VALIDATION,
        _ => TRANSPORT,
    }
}

fn core_code(e: &Error) -> u8 {
    match e {
        Error::Parameter(_)
        | Error::Dimension(_)
        | Error::Format { .. }
        | Error::Payload(_)
        | Error::Perturbation(_)
        | Error::Image(_)
        | Error::Json(_)
        | Error::Csv(_) => VALIDATION,
        Error::Degenerate(_) | Error::Poisoned { .. } => DEGENERATE,
        Error::Query { .. } => TRANSPORT,
        Error::Policy(p) => policy_code(p),
        Error::Io(_) => FAILURE,
    }
}

/// First classifiable cause in the chain decides the code.
pub fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(c) = cause.downcast_ref::<Classified>() {
            return c.code;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return core_code(e);
        }
        if let Some(e) = cause.downcast_ref::<PolicyError>() {
            return policy_code(e);
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() || cause.downcast_ref::<csv::Error>().is_some() {
            return VALIDATION;
        }
    }
    FAILURE
}
