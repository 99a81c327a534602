pub mod calibration;
pub mod control;
pub mod dataset;
pub mod error;
pub mod fd;
pub mod kernel;
pub mod metrics;
pub mod nn;
pub mod operator;
pub mod presets;
pub mod sim;
pub mod train;
pub mod units;

pub use error::{Error, Result};
