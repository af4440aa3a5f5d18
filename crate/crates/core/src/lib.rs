//! Block-wise hierarchical Gaussian splatting on the CPU.
//!
//! The pipeline partitions a calibrated sparse reconstruction into
//! ground-plane blocks, grows an octree of level-of-detail anchors per block,
//! trains a small neural decoder that turns each anchor into a handful of 3D
//! Gaussians, and fuses the trained blocks back into one scene that renders
//! with a single global compositing pass.
//!
//! Modules follow the data flow: [`scene`]/[`colmap`]/[`synth`] produce
//! inputs, [`partition`] splits them into blocks, [`octree`] manages anchors,
//! [`gaussian`]/[`rasterize`] implement the differentiable renderer,
//! [`decoder`] the per-block neural head, [`loss`]/[`trainer`] the
//! optimization, and [`fusion`] the final merge and evaluation.

pub mod adam;
pub mod binio;
pub mod colmap;
pub mod config;
pub mod decoder;
pub mod error;
pub mod gaussian;
pub mod image;
pub mod loss;
pub mod fusion;
pub mod model;
pub mod octree;
pub mod partition;
pub mod synth;
pub mod trainer;
pub mod rasterize;
pub mod scene;

pub use error::{Error, Result};
