use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter domain error for {family}: {reason}")]
    ParameterDomain { family: String, reason: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: String,
    },

    #[error("state {0} is absorbing")]
    AbsorbingState(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("quadrature did not converge after {subdivisions} subdivisions (estimate {estimate}, error {error})")]
    NonConvergence {
        estimate: f64,
        error: f64,
        subdivisions: usize,
    },

    #[error("root finding failed: {0}")]
    RootFinding(String),

    #[error("defective holding-time distribution in state {state}: exit probabilities sum to {sum}")]
    DefectiveDistribution { state: String, sum: f64 },

    #[error("conditional sojourn law {from}->{to} is undefined because p = 0")]
    UndefinedConditional { from: String, to: String },

    #[error("holding-time survival of state {state} is zero at t = {t}")]
    TailEvaluation { state: String, t: f64 },

    #[error("subject {subject}, step {step}: transition {from}->{to} has probability zero under the model")]
    ImpossiblePath {
        subject: String,
        step: usize,
        from: String,
        to: String,
    },

    #[error("transition {from}->{to}: event at duration {duration} where the intensity is infinite")]
    SingularLikelihood { from: String, to: String, duration: f64 },

    #[error("{path}: row {row}: {message}")]
    Ingestion { path: String, row: usize, message: String },

    #[error("cannot compare fits: {0}")]
    Comparison(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed inputs rather than numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Ingestion { .. }
                | Error::Io { .. }
                | Error::Json { .. }
                | Error::Csv(_)
                | Error::InvalidModel(_)
                | Error::ImpossiblePath { .. }
                | Error::Comparison(_)
                | Error::DimensionMismatch { .. }
                | Error::ParameterDomain { .. }
                | Error::Domain(_)
                | Error::AbsorbingState(_)
        )
    }
}
