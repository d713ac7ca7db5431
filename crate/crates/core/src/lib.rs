pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod forecast;
pub mod gaussian;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod plot;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
