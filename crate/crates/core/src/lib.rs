pub mod attack;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod federated;
pub mod metrics;
pub mod nn;
pub mod privacy;
pub mod rng;

pub use error::{Error, Result};
