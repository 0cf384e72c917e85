//! Allocation-only numerics for multi-view geometric latent diffusion.
//!
//! Everything here is pure and `no_std` (with `alloc`): camera geometry,
//! procedural scene rendering with exact depth, view-role sampling, the
//! linear flow path and its Euler sampler, latent statistics, and the
//! evaluation metrics. Tensor-backed networks, file formats and the CLI live
//! in the `gld` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod camera;
pub mod condition;
mod error;
pub mod flow;
pub mod levels;
pub mod metrics;
pub mod pck;
pub mod raster;
pub mod scene;
pub mod stats;
pub mod trajectory;
pub mod views;

pub use camera::{CameraPose, RigidTransform, Sim3};
pub use error::{Error, Result};
pub use levels::{LevelMask, NUM_LEVELS};
pub use scene::{MultiViewSequence, SceneSpec, TrajectoryKind, ViewSample};
