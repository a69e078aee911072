//! Core model of a meal-delivery digital twin: hexagonal service region,
//! order generation, demand forecasting, a minute-step simulator, and
//! deep Q-learning agents for order dispatching and courier steering.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod dispatch;
pub mod error;
pub mod eval;
pub mod hexgrid;
pub mod forecast;
pub mod rlcore;
pub mod scenario;
pub mod simcore;
pub mod steering;
pub mod trainer;

pub use error::{ConfigError, DomainError};
pub use hexgrid::{GridId, HexCoord, ServiceRegion};
