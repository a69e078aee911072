//! File formats, experiment pipeline and rendering for the meal-delivery
//! digital twin. The `mealtwin` binary is a thin layer over this crate.

pub mod error;
pub mod experiment;
pub mod formats;
pub mod report;
pub mod snapshot;
pub mod timing;

pub use error::{AppError, Result};
