//! Gaussian-process binary classification with automatic discovery of
//! compositional kernel structure, fit by sequential Monte Carlo.

pub mod data;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod math;
pub mod model;
pub mod predict;
pub mod smc;

pub use error::{Error, Result};
