//! Asynchronous SGD under stochastic staleness: staleness models, adaptive step
//! sizes, a simulation engine and analysis tools.

pub mod analysis;
pub mod distributions;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod problems;
pub mod specialfn;
pub mod steppolicy;

pub use error::{Error, Result};
