//! Binary neural network for single-lead ECG classification.
//!
//! Weights and activations are ±1 packed into `u64` words; convolutions reduce to
//! XNOR and popcount. Batch norm and PReLU fold into per-channel integer thresholds
//! so inference needs no floating point past the first block.

pub mod bintensor;
pub mod data;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod modelfile;
pub mod ops;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use model::{build_config, build_default_config, fuse, FusedModel, Mode, NetConfig, TrainedParams};
pub use train::{TrainConfig, Trainer};
