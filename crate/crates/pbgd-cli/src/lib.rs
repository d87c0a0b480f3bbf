//! Experiment harness around `pbgd-core`: a flat key-value configuration
//! format, trajectory/diagnostic CSV emission, one-command reproductions, and
//! parameter sweeps.

pub mod config;
pub mod csvio;
pub mod reproduce;
pub mod runner;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("solver failure: {0}")]
    Divergence(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl HarnessError {
    /// Process exit code: 2 config error, 3 solver divergence, 5 io error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Divergence(_) => 3,
            HarnessError::Io { .. } => 5,
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<pbgd_core::solvers::SolverError> for HarnessError {
    fn from(err: pbgd_core::solvers::SolverError) -> Self {
        use pbgd_core::solvers::SolverError;
        match err {
            SolverError::InvalidConfig(msg) => HarnessError::Config(msg),
            other => HarnessError::Divergence(other.to_string()),
        }
    }
}

impl From<pbgd_core::diagnostics::DiagnosticsError> for HarnessError {
    fn from(err: pbgd_core::diagnostics::DiagnosticsError) -> Self {
        use pbgd_core::diagnostics::DiagnosticsError;
        match err {
            DiagnosticsError::InvalidParam(msg) => HarnessError::Config(msg),
            other => HarnessError::Divergence(other.to_string()),
        }
    }
}

impl From<pbgd_core::problems::ProblemError> for HarnessError {
    fn from(err: pbgd_core::problems::ProblemError) -> Self {
        HarnessError::Config(err.to_string())
    }
}
