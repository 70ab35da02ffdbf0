use std::fmt;
use std::io;
use std::path::Path;

use roar3d_core::Error;

/// Process exit status of a failed command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Failure {
    Other = 1,
    Config = 2,
    MissingInput = 3,
    Divergence = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Failure,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Failure, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Failure::Config, message)
    }

    pub fn missing(path: &Path) -> Self {
        Self::new(Failure::MissingInput, format!("missing input: {}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Divergence { .. } => Failure::Divergence,
            Error::InvalidArgument(_) | Error::UnknownClass(_) => Failure::Config,
            Error::Io(io) if io.kind() == io::ErrorKind::NotFound => Failure::MissingInput,
            _ => Failure::Other,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::new(Failure::Other, format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new(Failure::Other, format!("json: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
