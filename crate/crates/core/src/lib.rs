//! Numerical laboratory for subcritical branching particle systems with
//! immigration and their superprocess limit.

pub mod bps;
pub mod cli;
pub mod error;
pub mod limits;
pub mod model;
pub mod motion;
pub mod pde;
pub mod quad;
pub mod stats;

pub use error::{Error, Result};
