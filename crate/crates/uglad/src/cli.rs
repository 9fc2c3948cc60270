//! Command-line front end: data ingestion, mode dispatch, benchmark
//! orchestration, and machine-readable exports. The thin `uglad` binary
//! parses arguments and delegates here.

pub mod commands;
pub mod compare;
pub mod export;
pub mod io;
pub mod manifest;
pub mod scenario;

use crate::baseline::BaselineError;
use crate::data::DataError;
use crate::fit::FitError;
use crate::glad::GladError;
use crate::linalg::LinalgError;
use crate::metrics::MetricsError;
use thiserror::Error;

/// Process exit codes: 0 success, 2 argument error, 3 data error,
/// 4 numerical failure.
pub const EXIT_ARGUMENT: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn io(path: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// Exit code for this error per the documented contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::InvalidArgument(_) => EXIT_ARGUMENT,
            CliError::Parse { .. } | CliError::Io { .. } | CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match &e {
            FitError::InvalidConfig(msg) => CliError::InvalidArgument(msg.clone()),
            FitError::NumericalFailure(_) | FitError::Linalg(_) | FitError::Glad(_) => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        match &e {
            BaselineError::NoConvergence(_) | BaselineError::Linalg(_) => {
                CliError::Numerical(e.to_string())
            }
            BaselineError::EmptyGrid => CliError::InvalidArgument(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<LinalgError> for CliError {
    fn from(e: LinalgError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<GladError> for CliError {
    fn from(e: GladError) -> Self {
        CliError::Numerical(e.to_string())
    }
}
