use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{quantity} = {value} outside admissible range [{lo}, {hi}]")]
    Domain {
        quantity: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("fundamental diagram: {0}")]
    Model(String),

    #[error("equilibrium density {rho_star} veh/m is not congested (critical density {rho_c} veh/m)")]
    Regime { rho_star: f64, rho_c: f64 },

    #[error("initial condition: {0}")]
    InitialCondition(String),

    #[error("numerical blow-up at t = {t:.4} s: {reason}")]
    BlowUp { t: f64, reason: String },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("training aborted: {0}")]
    Training(String),

    #[error("single-instance model trained for lambda2 = {trained} m/s queried at {requested} m/s")]
    InstanceMismatch { trained: f64, requested: f64 },

    #[error("input out of range: {0}")]
    InputRange(String),

    #[error("ill-posed fit: {0}")]
    IllPosed(String),

    #[error("model file {path}: {reason}")]
    ModelFile { path: PathBuf, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
