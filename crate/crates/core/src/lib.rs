pub mod bench;
pub mod dataset;
pub mod daydream;
pub mod diffusion;
pub mod domain;
pub mod error;
pub mod inquiry;
pub mod metrics;
pub mod nn;

pub use error::{Error, Result};
