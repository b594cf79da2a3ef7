use thiserror::Error;

use crate::VehicleId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Geometry that makes a measurement or an observability row vanish.
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("inconsistent ranges: cos(phi) = {cos_phi}")]
    InconsistentRanges { cos_phi: f64 },

    /// Not enough data collected yet; the caller should keep collecting.
    #[error("not ready: {0}")]
    NotReady(String),

    #[error("missing motion input for vehicle {0}")]
    StaleInput(VehicleId),

    #[error("out-of-order timestamp: {got} after {last}")]
    OutOfOrder { last: f64, got: f64 },

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
