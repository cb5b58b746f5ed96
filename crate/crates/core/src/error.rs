use made_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("scene config unsatisfiable: {0}")]
    Unsatisfiable(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("attack produced a non-finite gradient at iterate {iterate}")]
    NonFiniteGradient { iterate: usize },
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("assignment needs rows <= columns, got {rows}x{cols}")]
    TooManyRows { rows: usize, cols: usize },
    #[error("benign bank too small: {0}")]
    BankTooSmall(String),
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
}

pub type Result<T> = std::result::Result<T, CoreError>;
