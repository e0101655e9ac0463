//! Exposure-aware matrix factorization for recommendation.

pub mod data;
pub mod error;
pub mod experiment;
pub mod ipw;
pub mod matrix;
pub mod metrics;
pub mod outcome;
pub mod pf;
pub mod sim;

pub use error::{Error, Result};
