//! Saliency-driven keypoint detection for 3D point clouds.

pub mod checkpoint;
pub mod descriptor;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geom;
pub mod harness;
pub mod nn;
pub mod saliency;

pub use error::{Error, Result};
