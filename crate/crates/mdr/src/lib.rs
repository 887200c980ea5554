//! Dataset synthesis, two-stage training, evaluation, ablations and reports
//! for the multi-degradation restoration pipeline in `mdr-core`.

pub mod catalog;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod hash;
pub mod imageio;
pub mod pipeline;
pub mod report;
pub mod stage1;
pub mod stage2;

pub use error::{Error, Result};
