//! Multimodal abstractive summarization, desk scale.
//!
//! A video sample arrives as three streams: visual feature vectors, acoustic
//! feature vectors, and text tokens from speech recognition plus optional
//! slide OCR. The two token streams are fused by a guided attention that
//! suppresses redundant OCR tokens, every stream is resampled to a common
//! clock, projected into fixed-width blocks, and fed through a factorized
//! multimodal transformer used as a decoder-only language model: the target
//! summary is appended behind a delimiter and predicted token by token.
//!
//! Everything runs on a reverse-mode autodiff tape over dense f64 tensors,
//! with deterministic seeding end to end: same seed, same bytes.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod mfcc;
pub mod model;
pub mod optim;
pub mod rng;
pub mod rouge;
pub mod sequence;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
