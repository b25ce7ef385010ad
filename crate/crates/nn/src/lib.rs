//! Graph-temporal event forecaster on a small reverse-mode autodiff tape.

pub mod error;
pub mod fixtures;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{NnError, Result};
pub use model::{Checkpoint, Model, ModelConfig, Variant};
pub use train::{train, EpochLog, SampleSource, TrainConfig, TrainOutcome};
