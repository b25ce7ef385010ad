use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coordinate lat={lat_deg} lon={lon_deg}")]
    InvalidCoordinate { lat_deg: f64, lon_deg: f64 },
    #[error("line of sight below horizon (elevation {elevation_deg} deg)")]
    BelowHorizon { elevation_deg: f64 },
    #[error("identical carrier frequencies ({0} Hz)")]
    DegenerateFrequencies(f64),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("normalization fit on an empty set")]
    EmptyNormFit,
    #[error("snapshots are not consecutive: expected t={expected}, found t={found}")]
    NonConsecutive { expected: i64, found: i64 },
    #[error("window needs {expected} snapshots, got {found}")]
    WindowLength { expected: usize, found: usize },
    #[error("tabulated orbit file: {0}")]
    OrbitTable(String),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
