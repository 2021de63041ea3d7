//! Error taxonomy mapped to process exit codes: 2 validation, 3 numerical,
//! 4 I/O.

use esfm::EsfmError;
use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config, or input data shape; exit code 2.
    Validation(String),
    /// Computation failed on valid inputs; exit code 3.
    Numerical(String),
    /// Filesystem problem; exit code 4.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> CliError {
        CliError::Io(format!("{}: {err}", path.display()))
    }

    /// Errors raised while loading input files are input problems.
    pub fn from_load(err: EsfmError) -> CliError {
        CliError::Validation(err.to_string())
    }

    /// Errors raised during estimation: configuration shapes are validation,
    /// everything else is a numerical failure.
    pub fn from_compute(err: EsfmError) -> CliError {
        match err {
            EsfmError::BadTau(_)
            | EsfmError::BadShape(_)
            | EsfmError::BadConfig(_)
            | EsfmError::BadIntercept { .. } => CliError::Validation(err.to_string()),
            _ => CliError::Numerical(err.to_string()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "io failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}
