//! Multi-view synthesis by flow-matching diffusion in the feature space of a
//! frozen geometric encoder.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geoenc;
pub mod latent;
pub mod mvdiff;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod prope;
pub mod report;
pub mod rgbdec;
pub mod stages;
pub mod train;

pub use error::{GldError, Result};
