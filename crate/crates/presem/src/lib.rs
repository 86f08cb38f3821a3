//! RGB-D surface reconstruction on multi-resolution voxel SDF grids.
//!
//! The pipeline: a lightweight density MLP pre-renders each ray to guide
//! dynamic-threshold hierarchical sampling; NeuS-style transmittance weights
//! composite color, semantic color and depth; a progressive two-stage
//! schedule trains coarse grids first and transfers them to fine grids; the
//! trained SDF is meshed by marching cubes and scored against ground truth
//! with Chamfer-L1, normal consistency, F-score, IoU, accuracy and
//! completion.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod field;
pub mod geometry;
pub mod losses;
pub mod mesher;
pub mod renderer;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
