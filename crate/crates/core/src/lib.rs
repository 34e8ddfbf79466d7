//! Core library for dual-network semi-supervised image segmentation:
//! backbones, losses, metrics, supervision topologies, synthetic data,
//! and a deterministic CPU trainer.

pub mod backbones;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod plots;
pub mod semi;
pub mod sweep;
pub mod topology;
pub mod trainer;

pub use error::{Error, Result};
