//! Privacy-preserving split inference by dynamic channel obfuscation.
//!
//! The crate bundles a small reverse-mode autodiff engine, the split pipeline
//! (spatial decoupling pre-processor, client network, per-sample channel
//! filter, server task network), the min-max training protocol that trains the
//! channel filter against a proxy adversary, reconstruction and attribute
//! leakage attacks, image metrics, exact discrete mutual-information checks
//! for channel pruning, data sources and the benchmark container format.

pub mod attacks;
pub mod autograd;
pub mod benchmark;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image_io;
pub mod metrics;
pub mod mi;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
