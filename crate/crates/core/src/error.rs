use thiserror::Error;

/// Errors produced anywhere in the inference and diagnostics pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric: |m[{row}][{col}] - m[{col}][{row}]| = {gap:.3e}")]
    SymmetryViolation { row: usize, col: usize, gap: f64 },

    #[error("matrix is not positive semi-definite: eigenvalue {eigenvalue:.3e}")]
    NotPsd { eigenvalue: f64 },

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    #[error("model evaluation produced a non-finite value at x = {x:?}")]
    ModelEvaluation { x: Vec<f64> },

    #[error("simulation failed at step {step}: {source}")]
    SimulationStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("segment {segment}: {source}")]
    Segment {
        segment: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("duplicate observation for unit `{unit}` at time {time}")]
    DuplicateKey { unit: String, time: f64 },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("column `{0}` has zero variance")]
    DegenerateColumn(String),

    #[error("kernel density estimate is degenerate: {0}")]
    DegenerateKde(String),

    #[error("importance weights are degenerate (max log-weight {max_logweight}, ESS {ess})")]
    DegenerateWeights { max_logweight: f64, ess: f64 },

    #[error("training diverged at epoch {epoch} (learning rate {learning_rate})")]
    Divergence { epoch: usize, learning_rate: f64 },

    #[error("Gram matrix is ill-conditioned (condition estimate {condition:.3e})")]
    Conditioning { condition: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("series has zero variance")]
    DegenerateSeries,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input or usage).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::SimulationStep { source, .. } | Error::Segment { source, .. } => {
                source.is_numerical()
            }
            Error::NotPsd { .. }
            | Error::DegenerateCovariance(_)
            | Error::ModelEvaluation { .. }
            | Error::DegenerateKde(_)
            | Error::DegenerateWeights { .. }
            | Error::Divergence { .. }
            | Error::Conditioning { .. }
            | Error::DegenerateSeries
            | Error::SymmetryViolation { .. } => true,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
