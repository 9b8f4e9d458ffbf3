use std::path::PathBuf;

use thiserror::Error;

/// Failure of a command, carrying the process exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Core(#[from] lanembed::Error),
}

impl CliError {
    pub const USAGE: i32 = 2;
    pub const NUMERIC: i32 = 3;
    pub const BENCH_SANITY: i32 = 4;

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(lanembed::Error::Numeric { .. }) => Self::NUMERIC,
            CliError::Core(lanembed::Error::BenchSanity(_)) => Self::BENCH_SANITY,
            _ => Self::USAGE,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
