use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("variable does not belong to this tape")]
    ForeignVariable,

    #[error("degenerate alignment: {0}")]
    DegenerateAlignment(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("inner solver diverged at step {step} (objective {objective:e})")]
    Diverged { step: usize, objective: f64 },

    #[error("trajectory states were not stored")]
    TrajectoryNotStored,

    #[error("flow integration failed at t={t}: {message}")]
    Integration { t: f64, message: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("every sample in the batch diverged ({0} samples)")]
    AllDiverged(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Numerical failures (as opposed to bad input) map to their own exit code in the CLI.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::Diverged { .. }
                | Error::Integration { .. }
                | Error::AllDiverged(_)
                | Error::DegenerateAlignment(_)
        )
    }
}
