use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain mismatch: {0}")]
    DomainMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("degenerate variable `{0}`: standard deviation is zero")]
    DegenerateVariable(String),

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("fit error at gridpoint ({lat}, {lon}): {msg}")]
    Fit { lat: usize, lon: usize, msg: String },

    #[error("invalid horizon {0}")]
    InvalidHorizon(usize),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("training failure at step {step}: {msg}")]
    TrainingFailure { step: usize, msg: String },

    #[error("rollout diverged at month {month}: {msg}")]
    RolloutDiverged { month: usize, msg: String },

    #[error("checkpoint selection failed: {0}")]
    SelectionFailure(String),

    #[error("empty region `{0}`")]
    EmptyRegion(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("misaligned inputs: {0}")]
    Misaligned(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// Errors that stem from numerics rather than from malformed inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::TrainingFailure { .. }
                | Error::RolloutDiverged { .. }
                | Error::SelectionFailure(_)
                | Error::Fit { .. }
                | Error::UndefinedMetric(_)
        )
    }

    /// Short machine-readable kind, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::DomainMismatch(_) => "domain-mismatch",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::Format { .. } => "format-error",
            Error::DegenerateVariable(_) => "degenerate-variable",
            Error::UnknownScenario(_) => "unknown-scenario",
            Error::Fit { .. } => "fit-error",
            Error::InvalidHorizon(_) => "invalid-horizon",
            Error::InvalidDataset(_) => "invalid-dataset",
            Error::TrainingFailure { .. } => "training-failure",
            Error::RolloutDiverged { .. } => "rollout-diverged",
            Error::SelectionFailure(_) => "selection-failure",
            Error::EmptyRegion(_) => "empty-region",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Misaligned(_) => "misaligned",
            Error::Io(_) => "io-error",
            Error::Csv(_) => "format-error",
        }
    }
}
