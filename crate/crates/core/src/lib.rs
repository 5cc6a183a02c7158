//! Multi-view depth reasoning on posed images.
//!
//! The crate sweeps fronto-parallel planes through a reference view to get a
//! per-pixel depth distribution, places descriptors into a voxel grid using
//! the top-k depth proposals of that distribution, and can refine the
//! distributions by rendering pixel-aligned Gaussian splats into held-out
//! views. Synthetic ray-cast scenes provide ground truth for all of it.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boxes;
pub mod camera;
pub mod config;
pub mod costvol;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod raster;
pub mod sampling;
pub mod scenegen;
pub mod splat;

pub use camera::{CameraView, Intrinsics, Pose, Ray};

pub use error::{Error, Result};
pub use raster::Raster;
