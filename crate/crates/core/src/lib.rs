pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod predictor;
pub mod relation;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
