use thiserror::Error;

use crate::tensor::Tensor;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("rank-zero tensor unsupported")]
    RankZero,

    #[error("undefined relative error: reference has zero norm")]
    UndefinedRelativeError,

    /// A state left the representable range during integration. For reverse
    /// flows of stiff fields this is an expected outcome, not a bug; callers
    /// that treat it as data (e.g. reversibility scans) map it to +inf.
    #[error("blow-up detected at t={t} (step {step})")]
    BlowUp {
        t: f64,
        step: usize,
        /// Last finite state before the blow-up, when one exists.
        last_state: Option<Box<Tensor>>,
    },

    #[error("step budget exhausted: {max_steps} steps reached at t={t}")]
    StepBudgetExhausted { t: f64, max_steps: usize },

    #[error("tape required for DTO")]
    TapeRequired,

    #[error("missing checkpoint: block {block}, time index {index}")]
    MissingCheckpoint { block: usize, index: usize },

    #[error("budget exceeds steps: m={m} > Nt={nsteps}")]
    BudgetExceedsSteps { m: usize, nsteps: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{path}:{line}: {msg}")]
    Dataset {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("pgm: {0}")]
    Pgm(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn is_blow_up(&self) -> bool {
        matches!(self, Error::BlowUp { .. })
    }
}
