//! Active self-training for weakly supervised semantic segmentation of point
//! clouds.
//!
//! The engine trains a per-point classifier from a sparse set of queried
//! annotations. Each round it propagates annotations through super-voxels,
//! adds confident pseudo-labels, measures per-point uncertainty with an
//! augmentation ensemble and queries the next batch of points.

pub mod classifier;
pub mod cloud;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod labels;
pub mod pipeline;
pub mod sampler;
pub mod seed;
pub mod supervoxel;

pub use error::{Error, Result};
