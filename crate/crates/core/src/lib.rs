pub mod calibration;
pub mod classify;
pub mod emccd;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod optics;
pub mod register;

pub use error::{Error, Result};
