//! Exit codes.
//!
//! | code | meaning |
//! |---|---|
//! | 0 | success |
//! | 1 | I/O or internal failure |
//! | 2 | usage, parse or validation error |
//! | 3 | training diverged |
//! | 4 | rollout diverged |
//! | 5 | stability certificate is false |

use std::fmt;

use stableflow::Error;

pub const OK: u8 = 0;
pub const IO: u8 = 1;
pub const INVALID: u8 = 2;
pub const TRAINING_DIVERGED: u8 = 3;
pub const ROLLOUT_DIVERGED: u8 = 4;
pub const NOT_CERTIFIED: u8 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        Self { code: INVALID, message: message.into() }
    }

    pub fn io(context: &str, err: impl fmt::Display) -> Self {
        Self { code: IO, message: format!("{context}: {err}") }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub fn code_for(err: &Error) -> u8 {
    match err {
        Error::TrainingDiverged { .. } => TRAINING_DIVERGED,
        Error::Divergence { .. } => ROLLOUT_DIVERGED,
        Error::Io(_) | Error::NumericalFailure { .. } | Error::Contract(_) => IO,
        _ => INVALID,
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        Self { code: code_for(&err), message: err.to_string() }
    }
}
