//! Command-line front end for `epk-core`.

pub mod args;
pub mod commands;
pub mod experiment;

use std::fmt;

use epk_core::{Error, ErrorKind};

/// A core error, tagged with the experiment stage that raised it.
#[derive(Debug)]
pub struct CliError {
    pub stage: Option<&'static str>,
    pub source: Error,
}

impl CliError {
    pub fn stage(stage: &'static str, source: Error) -> Self {
        CliError {
            stage: Some(stage),
            source,
        }
    }
}

impl From<Error> for CliError {
    fn from(source: Error) -> Self {
        CliError { stage: None, source }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.stage {
            Some(s) => write!(f, "{s}: {}", self.source),
            None => write!(f, "{}", self.source),
        }
    }
}

impl std::error::Error for CliError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

/// 2 for bad input or config, 3 for numerical failures, 4 for I/O.
pub fn exit_code(e: &CliError) -> i32 {
    match e.source.kind() {
        ErrorKind::Validation => 2,
        ErrorKind::Numerical => 3,
        ErrorKind::Io => 4,
    }
}
