//! Knowledge-distillation anomaly detection with simulated INT-8
//! quantization of the student networks.
//!
//! The crate covers a small deterministic tensor engine, affine
//! quantization with an integer convolution path, histogram calibration
//! (entropy, L2 and min-max objectives), three distillation schemes
//! (feature-pyramid matching, reverse distillation and a student ensemble),
//! post-training and quantization-aware quantization, synthetic datasets,
//! evaluation and a binary model format.

pub mod autograd;
pub mod calib;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod model_file;
pub mod qnet;
pub mod quant;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};
