//! Compact Convolutional Transformer (CCT) pipeline for binary chest X-ray
//! classification.

pub mod datasplit;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod plot;
pub mod rng;
pub mod trainer;

pub use error::{CctError, Result};
