//! One-class anomaly detection with a GAN trained on normal images only.

pub mod data;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod generator;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod train;

pub use error::{Error, Result};
