use thiserror::Error;

use crate::trainer::TrainRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid network shape: {0}")]
    InvalidShape(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown target function id `{0}`")]
    UnknownFunction(String),

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: u64, record: Box<TrainRecord> },

    #[error("non-finite value in {context} at input {input:?}")]
    NonFiniteEvaluation { context: &'static str, input: Vec<f64> },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("malformed weight dump: {0}")]
    Dump(#[from] serde_json::Error),
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
