//! Data path for observation-space ionospheric irregularity forecasting:
//! line-of-sight geometry, synthetic scenarios, ROTI features, zero-baseline
//! quality-control labels, per-timestep K-NN graphs and training windows.

pub mod ephemeris;
pub mod error;
pub mod features;
pub mod geo;
pub mod graph;
pub mod qc;
pub mod synth;
pub mod windowing;

pub use error::{Error, Result};
