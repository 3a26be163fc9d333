use std::fmt;

use flars_core::FlarsError;

pub const EXIT_GENERIC: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_SCHEMA: i32 = 4;

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    pub fn schema(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_SCHEMA,
            message: message.into(),
        }
    }

    pub fn generic(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_GENERIC,
            message: message.into(),
        }
    }

    pub fn not_converged(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NOT_CONVERGED,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<FlarsError> for CliError {
    fn from(e: FlarsError) -> Self {
        let code = match &e {
            FlarsError::InvalidArgument(_)
            | FlarsError::SingularMatrix(_)
            | FlarsError::DegenerateResponse(_)
            | FlarsError::NoSignal
            | FlarsError::IllPosed(_)
            | FlarsError::UnknownSubject(_)
            | FlarsError::Csv(_) => EXIT_DATA,
            FlarsError::OptimizationFailed(_) => EXIT_NOT_CONVERGED,
            FlarsError::SchemaMismatch(_) | FlarsError::Json(_) => EXIT_SCHEMA,
            _ => EXIT_GENERIC,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::generic(e.to_string())
    }
}
