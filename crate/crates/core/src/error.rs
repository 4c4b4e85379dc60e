use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("power iteration did not converge after {iterations} iterations")]
    PowerIteration { iterations: usize },

    #[error("edge coefficient calibration failed after {attempts} attempts (last realized density {last_density:.5}, target {target:.5})")]
    Calibration {
        attempts: usize,
        last_density: f64,
        target: f64,
    },

    #[error("intercept calibration bracket failure: prevalence over [{lo}, {hi}] is [{p_lo:.4}, {p_hi:.4}], target {target}")]
    InterceptBracket {
        lo: f64,
        hi: f64,
        p_lo: f64,
        p_hi: f64,
        target: f64,
    },

    #[error("structural error: {0}")]
    Structure(String),

    #[error("SAR system for cluster {cluster} is singular or ill-conditioned: {reason}")]
    SarPrecondition { cluster: usize, reason: String },

    #[error("outcome generation failed: {0}")]
    Generation(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-positive weight {weight} at row {row}")]
    NonPositiveWeight { row: usize, weight: f64 },

    #[error("design matrix is rank deficient (rank {rank} < {cols} columns)")]
    SingularDesign { rank: usize, cols: usize },

    #[error("zero degree for recruit at position {index}")]
    ZeroDegree { index: usize },

    #[error("complete separation detected in logistic fit")]
    Separation,

    #[error("inner IRLS diverged: {0}")]
    IrlsDivergence(String),

    #[error("optimizer did not converge: {0}")]
    NonConvergence(String),

    #[error("{context}: {source}")]
    Io {
        context: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Csv {
        context: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            context: path.into(),
            source,
        }
    }

    pub fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            context: path.into(),
            source,
        }
    }
}
