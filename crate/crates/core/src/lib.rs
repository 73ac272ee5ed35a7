//! Patch-level supervised contrastive learning for hierarchical vision
//! transformers, trained jointly with a segmentation objective.

pub mod checks;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod mining;
pub mod model;
pub mod patching;
pub mod raster;
pub mod tensor;

pub use error::{Error, Result};
