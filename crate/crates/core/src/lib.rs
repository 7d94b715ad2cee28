//! Masked video-token prediction.
//!
//! Frames are tokenized independently by a vector-quantized autoencoder
//! ([`tokenizer`]); a bidirectional transformer with spatial and spatiotemporal
//! window attention ([`model`]) is trained to recover masked future tokens
//! ([`trainer`]); videos are generated by iterative confidence-based unmasking
//! ([`decoder`]); and the predictor drives a cross-entropy-method visual MPC
//! loop on a synthetic pushing task ([`planner`]). [`harness`] holds synthetic
//! data, metrics, configuration and evaluation.

pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Generator;
pub use tensor::{Array, Scalar, Tape, Var};

pub mod decoder;
pub mod harness;
pub mod model;
pub mod planner;
pub mod tokenizer;
pub mod trainer;
