use std::fmt::Display;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use drivesql::jsonio::JsonlError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input content, bad flags or a failed check.
    #[error("{0}")]
    Validation(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Validation(_) => ExitCode::from(1),
            CliError::Io { .. } => ExitCode::from(2),
        }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// A validation error prefixed with the offending file.
    pub fn in_file(path: &Path, message: impl Display) -> Self {
        CliError::Validation(format!("{}: {message}", path.display()))
    }

    pub fn jsonl(path: &Path, err: JsonlError) -> Self {
        match err {
            JsonlError::Parse { line, source } => {
                CliError::Validation(format!("{}:{line}: {source}", path.display()))
            }
            JsonlError::Io(source) => CliError::io(path, source),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
