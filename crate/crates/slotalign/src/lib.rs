//! Slot-filling non-autoregressive forced aligner.
//!
//! The library trains a small encoder + language-model stack on synthetic
//! frame sequences. Transcripts are augmented with timestamp slots; the model
//! fills every slot with a discretized frame index in a single forward pass.
//! Supporting modules cover streaming encoding, post-processing, alignment
//! metrics, a text wire protocol, and an efficiency benchmark harness.

pub mod adam;
pub mod aligner;
pub mod bench;
pub mod block;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod hashing;
pub mod kernels;
pub mod manifest;
pub mod mask;
pub mod metrics;
pub mod param;
pub mod postproc;
pub mod protocol;
pub mod scalar;
pub mod stream;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Real, Scalar, Wide};
pub use tensor::Tensor;
