use std::fmt;

use cdlg::Error;

/// Process exit codes.
pub const CONFIG: i32 = 1;
pub const DATA: i32 = 2;
pub const RUNTIME: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: DATA,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: RUNTIME,
            message: message.into(),
        }
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
            Error::Config(_) | Error::Json { .. } => CONFIG,
            Error::Parse { .. }
            | Error::Data(_)
            | Error::Bundle { .. }
            | Error::Checksum { .. }
            | Error::Index { .. }
            | Error::Io { .. } => DATA,
            Error::Shape { .. }
            | Error::Backward(_)
            | Error::NonFiniteGradient(_)
            | Error::NonFiniteLoss { .. }
            | Error::Checkpoint(_) => RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}
