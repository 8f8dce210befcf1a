//! Desk-scale pose-based visual servoing lab.
//!
//! Modules, bottom-up:
//! - [`geometry`]: SE(3) poses, θu rotations, twist integration
//! - [`scene`]: procedural planar scenes and a pinhole ray caster
//! - [`dataset`]: LSD/SSD image-pair generation and the `VSDS` file format
//! - [`tensornet`]: reverse-mode autodiff, the pose network and its losses
//! - [`train`]: the six training regimes, MAML included
//! - [`servo`]: the closed control loop and switching policies
//! - [`eval`]: batch comparisons, ablations, CSV and plot output

pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod rng;
pub mod scene;
pub mod servo;
pub mod tensornet;
pub mod train;

pub use error::{Error, Result};
