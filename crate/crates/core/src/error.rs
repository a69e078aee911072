use alloc::string::String;

use thiserror::Error;

use crate::hexgrid::{GridId, HexCoord};

/// Geometry and region errors.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("coordinate {0} lies outside the service region")]
    OutsideRegion(HexCoord),
    #[error("grid {0} is not part of the service region")]
    UnknownGrid(GridId),
    #[error("duplicate grid id {0}")]
    DuplicateGridId(GridId),
    #[error("duplicate grid coordinate {0}")]
    DuplicateCoord(HexCoord),
    #[error("service region is not connected")]
    DisconnectedRegion,
    #[error("service region has no grids")]
    EmptyRegion,
    #[error("invalid region dimensions {cols}x{rows}")]
    InvalidDimensions { cols: u32, rows: u32 },
}

/// Scenario configuration and data-ingestion errors.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("no arrival rate configured for grid {grid} at hour {hour}")]
    MissingRate { grid: GridId, hour: u32 },
    #[error("negative arrival rate {rate} for grid {grid} at hour {hour}")]
    NegativeRate { grid: GridId, hour: u32, rate: f64 },
    #[error("grid {0} has an arrival rate but is not a restaurant grid")]
    RateOnHouseholdGrid(GridId),
    #[error("origin-destination row for grid {grid} sums to {sum}, expected 1")]
    OdNotNormalized { grid: GridId, sum: f64 },
    #[error("origin-destination row for grid {grid} has {got} entries, expected {expected}")]
    OdWrongLength { grid: GridId, got: usize, expected: usize },
    #[error("restaurant grid {0} has no origin-destination row")]
    MissingOdRow(GridId),
    #[error("fleet size must be at least 1")]
    EmptyFleet,
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("transaction history is empty")]
    EmptyHistory,
    #[error("transaction references restaurant grid {0}, which is not a restaurant grid of the region")]
    BadOrigin(GridId),
    #[error("transaction references household grid {0} outside the region")]
    BadDestination(GridId),
}
