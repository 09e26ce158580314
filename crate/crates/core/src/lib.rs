//! Joint representation learning and flow-matching generation for
//! three-axis accelerometer windows, with a diffusion baseline and an
//! evaluation suite.

pub mod commands;
pub mod data;
pub mod diffusion;
pub mod eval;
mod error;
pub mod flow;
pub mod model;
pub mod persist;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
