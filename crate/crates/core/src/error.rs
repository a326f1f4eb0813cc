use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the workbench. Variants are grouped by the
/// subsystem that produced them so callers can map them to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("mechanism: {0}")]
    Mechanism(String),

    #[error("reactor: {0}")]
    Reactor(String),

    #[error("input: {0}")]
    Input(String),

    #[error("solver: {0}")]
    Solver(String),

    #[error("solver: degenerate mesh cell {cell} (width {width:e} cm)")]
    DegenerateCell { cell: usize, width: f64 },

    #[error("solver: substep limit exceeded at t = {time:e} s after {halvings} halvings ({detail})")]
    SubstepLimit {
        time: f64,
        halvings: u32,
        detail: String,
    },

    #[error("solver: Newton iteration did not converge at t = {time:e} s (residual {residual:e})")]
    NewtonDivergence { time: f64, residual: f64 },

    #[error("sensitivity: {0}")]
    Sensitivity(String),

    #[error("objective: {0}")]
    Objective(String),

    #[error("optimizer: {0}")]
    Optimizer(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the forward model (as opposed to bad input).
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::Solver(_)
                | Error::DegenerateCell { .. }
                | Error::SubstepLimit { .. }
                | Error::NewtonDivergence { .. }
                | Error::Sensitivity(_)
        )
    }
}
