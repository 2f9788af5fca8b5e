//! Quantization error propagation for toy networks.
//!
//! The crate simulates low-bit quantization of small feed-forward and
//! transformer-style networks, splits the resulting activation error into
//! accumulated, introduced and interaction terms per module, trains toy
//! models with several matrix optimizers (full precision and QAT), and fits
//! iso-compute scaling laws with a parameter-efficiency multiplier.

pub mod decomposition;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod quant;
pub mod report;
pub mod scaling;
pub mod trainer;

pub use error::{Error, Result};
