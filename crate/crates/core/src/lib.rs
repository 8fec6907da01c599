//! Hierarchical Lovász embeddings for panoptic segmentation.

pub mod construct;
pub mod decoder;
pub mod embed;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod grid;
pub mod lovasz;
pub mod metrics;
pub mod rng;
pub mod synth;
pub mod thomson;
pub mod trainer;

pub use error::{HleError, Result};
