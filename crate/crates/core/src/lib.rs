//! Camouflaged object detection: an edge-guided detector with internal
//! feature coherence, an adversarial camouflage generator, the supervision
//! terms that tie them together, the four standard evaluation metrics and a
//! procedural data pipeline for desk-scale experiments.
//!
//! Everything runs on the autograd engine in [`iceg_tensor`]. Networks are
//! generic over the element type so that gradients can be verified in `f64`
//! while training runs in `f32`.

pub mod cfc;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
mod error;
pub mod esd;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;

pub use config::Config;
pub use error::{IcegError, Result};
pub use iceg_tensor as tensor;
