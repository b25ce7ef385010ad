//! Verification harness: metrics, baselines, subset analysis and
//! experiment tables.

pub mod dataset;
pub mod error;
pub mod experiments;
pub mod forecaster;
pub mod metrics;
pub mod report;

pub use error::{EvalError, Result};
pub use forecaster::{BuildContext, Forecaster, NeuralForecaster, Persistence, Registry};
pub use report::{MetricSet, MetricsReport, ScoredPoint, Subset};
