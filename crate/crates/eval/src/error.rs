use thiserror::Error;

use crate::metrics::MetricError;

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("unknown forecaster {0}")]
    UnknownForecaster(String),
    #[error("forecaster {0} needs a checkpoint")]
    MissingCheckpoint(String),
    #[error("checkpoint holds variant {found}, expected {expected}")]
    VariantMismatch { expected: String, found: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] pierce_nn::NnError),
    #[error(transparent)]
    Data(#[from] pierce_core::Error),
}
