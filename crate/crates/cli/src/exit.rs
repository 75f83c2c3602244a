use std::fmt;

use symbiotic::Error;

pub const USAGE: u8 = 2;
pub const DATA: u8 = 3;
pub const DIVERGENCE: u8 = 4;
pub const CHECK_FAILED: u8 = 1;

/// An error carrying the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError::new(USAGE, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Json(_) => USAGE,
            Error::Divergence { .. } => DIVERGENCE,
            _ => DATA,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(DATA, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new(USAGE, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Re-labels data-generation parameter errors, which are data errors at
/// the command surface.
pub fn as_data_error(e: Error) -> CliError {
    CliError::new(if matches!(e, Error::Divergence { .. }) { DIVERGENCE } else { DATA }, e.to_string())
}
