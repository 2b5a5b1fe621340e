use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    /// The conformal quantile rank exceeds the calibration set size, so every
    /// region radius is infinite.
    #[error(
        "calibration infeasible: rank {rank} exceeds {n_calib} calibration trajectories \
         (need ceil((n+1)(1-delta)) <= n, i.e. at least {required} trajectories for delta = {delta})"
    )]
    CalibrationInfeasible {
        rank: usize,
        n_calib: usize,
        required: usize,
        delta: f64,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("non-finite prediction at tau = {tau} (predicting from t = {t})")]
    Prediction { t: usize, tau: usize },

    /// Every available region radius for the pair is infinite, so no valid
    /// predicted constraint exists.
    #[error("constraint at (t = {t}, tau = {tau}) cannot be certified: region radius is infinite")]
    NotCertifiable { t: usize, tau: usize },

    #[error("a valid predicted constraint needs a finite region radius")]
    InfiniteRadius,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
