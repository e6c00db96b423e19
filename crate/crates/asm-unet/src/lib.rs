//! Score-guided scan-order segmentation for 3D tubular structures.
//!
//! The crate implements a 3D encoder/decoder segmentation network whose
//! feature maps can be routed through adaptive-scan blocks: voxel tokens are
//! sorted by a learned score, processed by a linear-time selective
//! state-space scan, restored to canonical order, and averaged across
//! branches. Training, metrics, synthetic data generation, and a CLI wrap
//! the core.
//!
//! Everything runs on a small f64 reverse-mode tape ([`tape`]); gradients
//! are validated against central finite differences throughout the test
//! suite and via the `gradcheck` CLI command.

pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod asm;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod scan_order;
pub mod ssm;
pub mod synth;
pub mod train;
pub mod unet;
pub mod tape;
pub mod volume;

pub use error::{Error, Result};
