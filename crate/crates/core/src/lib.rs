//! Model selection confidence sets for ARMAX time-series models.

pub mod engine;
pub mod forecast;
pub mod error;
pub mod likelihood;
pub mod model_space;
pub mod montecarlo;
pub mod series;
pub mod stats;

pub use error::{Error, Result};
