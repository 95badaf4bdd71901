use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid space: {0}")]
    InvalidSpace(String),

    #[error("KL divergence undefined: q[{index}] = 0 but p[{index}] = {p_val} > 0")]
    SupportViolation { index: usize, p_val: f64 },

    #[error("conditioning event {axis}[{index}] has zero probability")]
    ZeroMassCondition { axis: &'static str, index: usize },

    #[error("space mismatch: {0}")]
    SpaceMismatch(String),

    #[error("search space has {count} elements, cap is {cap}")]
    SearchSpaceTooLarge { count: u128, cap: u64 },

    #[error("no searched map satisfies the budget {budget}")]
    NoFeasibleMap { budget: f64 },

    #[error("curve has {feasible} feasible points, need at least 3")]
    CurveTooShort { feasible: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("loss node is not scalar (shape {rows}x{cols})")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty batch: {0}")]
    EmptyBatch(String),

    #[error("batch of {rows} rows is too small (need at least {need})")]
    BatchTooSmall { rows: usize, need: usize },

    #[error("loss diverged at step {step}: {loss}")]
    DivergedLoss { step: usize, loss: f64 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
