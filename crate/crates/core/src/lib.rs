//! Staged point-cloud learning on the CPU: abstraction and refinement
//! stages over sampled neighborhoods, learned positional encodings, a
//! gated decoder, and the training/analysis harness around them.
//!
//! Everything runs on an f64 reverse-mode tape with fixed-order reductions,
//! so identical (config, seed) pairs reproduce results bit-for-bit.

pub mod ablate;
pub mod aggregation;
pub mod analysis;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoding;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod train;

pub use config::AppConfig;
pub use error::{Error, Result};
pub use network::{BatchInput, Model, NetworkConfig, Preset, Task};
