//! Linear-attention in-context regression lab: data model, multi-head model,
//! GD/SAM training, reduced-order theory and simplicity-bias metrics.

pub mod attention;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod optimizers;
pub mod rng;
pub mod spectra;
pub mod theory;
pub mod upsampler;

pub use error::{Error, Result};
