use thiserror::Error;

/// Errors raised anywhere in the adaptation pipeline.
#[derive(Debug, Error)]
pub enum CtaError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("variable was not recorded on this tape")]
    ForeignVariable,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("batch of {0} sample(s) cannot provide batch statistics")]
    DegenerateBatch(usize),
    #[error("source pretraining diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("head row for class {0} is zero")]
    ZeroPrototype(usize),
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite loss at step {step} (reliable={reliable}, unsup={unsup}, ema={ema}, src={src}, cons={cons})")]
    NonFiniteLoss {
        step: u64,
        reliable: usize,
        unsup: f64,
        ema: f64,
        src: f64,
        cons: f64,
    },
    #[error("unknown {what} `{value}`")]
    Unknown { what: &'static str, value: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CtaError>;

impl CtaError {
    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CtaError::NonFinite(_) | CtaError::NonFiniteLoss { .. } | CtaError::Diverged { .. }
        )
    }
}
