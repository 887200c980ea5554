//! Core of a compositional multi-degradation image restoration pipeline.
//!
//! Everything here needs only an allocator: tensors and a small reverse-mode
//! autodiff engine, degradation synthesis, the perception, conditioning and
//! restoration networks, their losses, and image-quality metrics. File
//! formats, training loops and the command line live in the `mdr` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod ablation;
pub mod catalog;
pub mod conditioning;
pub mod degradation;
pub mod fft;
pub mod filters;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod perception;
pub mod real;
pub mod restoration;
pub mod rng;
pub mod scene;
pub mod synth;
pub mod tensor;

pub use degradation::{DegradationVector, Factor};
pub use graph::{Graph, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid catalog: {0}")]
    Catalog(String),
    #[error("severity out of range: {0}")]
    Severity(String),
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
