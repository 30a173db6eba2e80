//! Training small neural classifiers with stochastic regularization,
//! Monte-Carlo predictive uncertainty, and confidence calibration.

pub mod calib;
pub mod data;
pub mod error;
pub mod loss;
pub mod math;
pub mod model;
pub mod stochastic;
pub mod trainer;

pub use error::{Error, Result};
