//! Selective state-space models, their state-norm theory, and post-training
//! calibration of the transition scales for length extrapolation.

pub mod calibration;
pub mod data;
pub mod error;
pub mod linalg;
pub mod model;
pub mod norm_lab;
pub mod rng;
pub mod spectrum;
pub mod ssm;

pub use error::{Error, Result};
