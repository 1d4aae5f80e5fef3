//! LiDAR-conditioned novel-view painting for driving-scene reconstruction.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`scene`]: capture bundles in a unified world frame.
//! - [`lidar`]: aggregated LiDAR condition images.
//! - [`splat`]: dynamic Gaussian scene, tiled renderer and its gradients.
//! - [`painter`]: the one-step latent painter with attention fusion.
//! - [`losses`]: image losses and the composite training objectives.
//! - [`trainer`]: two-phase reconstruction with novel-view guidance.
//! - [`synth`]: procedural driving worlds with ray-cast ground truth.

pub mod error;
pub mod geometry;
pub mod image;
pub mod lidar;
pub mod losses;
pub mod optim;
pub mod painter;
pub mod scene;
pub mod splat;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
