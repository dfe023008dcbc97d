//! Frequency-aware decomposition network for probabilistic wrench forecasting.

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod spectral;
pub mod tape;
pub mod training;

pub use error::{FdnError, Result};
