use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("simulation diverged on path {path} at step {step}")]
    SimulationDiverged { path: usize, step: usize },

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("constraint `{label}` produced a non-finite value")]
    ConstraintEval { label: String },

    #[error("degenerate importance weights: {0}")]
    DegenerateWeights(String),

    #[error("ill-conditioned multiplier problem: {0}")]
    IllConditioned(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    TrainingDiverged { iteration: usize, reason: String },

    #[error("omega fell to {value:e} at t={t}, which is below the recovery floor")]
    DegenerateOmega { t: f64, value: f64 },

    #[error("PDE solver failed: {0}")]
    SolverFailed(String),

    #[error("query ({t}, {x}) lies outside the tabulated interior")]
    ExtrapolationRefused { t: f64, x: f64 },

    #[error("smile projection failed: {0}")]
    ProjectionFailed(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
