use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("kronecker product of size {rows}x{cols} exceeds the cap of {cap}")]
    TooLarge { rows: usize, cols: usize, cap: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("rank deficient: numerical rank {rank} < {cols} columns")]
    RankDeficient { rank: usize, cols: usize },

    #[error("matrix is not Hurwitz (largest eigenvalue real part {0:e})")]
    NotHurwitz(f64),

    #[error("initial gain does not stabilize the system (largest closed-loop real part {0:e})")]
    NotStabilizing(f64),

    #[error("no stabilizing Riccati solution: {0}")]
    NoStabilizingSolution(String),

    #[error("iteration did not converge within {iterations} iterations (last change {last_change:e})")]
    NoConvergence { iterations: usize, last_change: f64 },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("non-finite state at t = {0} s")]
    NonFinite(f64),

    #[error("state norm {norm:e} exceeded bound {bound:e} at t = {t} s")]
    Diverged { t: f64, norm: f64, bound: f64 },

    #[error("P is not invertible")]
    SingularP,

    #[error("feedforward system is ill-conditioned (condition number {0:e})")]
    IllConditioned(f64),

    #[error("no model estimate and no configured trigger constants")]
    MissingModel,

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
