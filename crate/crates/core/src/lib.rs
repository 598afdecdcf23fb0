//! Sensorless freehand 3-D ultrasound toolkit.

// Validation is written as `!(x > 0.0)` on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod compound;
pub mod config;
pub mod correlation;
pub mod error;
pub mod experiment;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod pose;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
