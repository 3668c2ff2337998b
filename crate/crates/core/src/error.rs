use std::path::PathBuf;

use thiserror::Error;

use crate::solver::SolverError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix is not positive semidefinite: smallest eigenvalue {min:e}, largest {max:e}")]
    NotPsd { min: f64, max: f64 },

    #[error("ill-conditioned {what}: condition number {cond:.3e}")]
    IllConditioned { what: &'static str, cond: f64 },

    #[error(transparent)]
    Solver(#[from] SolverError),

    #[error("cross-validation failed: no grid point converged")]
    NoConvergedGridPoint,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Parse { .. } => 4,
            _ => 3,
        }
    }

    /// Short machine-readable category for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NotPsd { .. } => "not_psd",
            Error::IllConditioned { .. } => "ill_conditioned",
            Error::Solver(_) => "solver",
            Error::NoConvergedGridPoint => "no_converged_grid_point",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
        }
    }
}
