//! Unsupervised spoken term discovery over frame-level feature matrices.

pub mod asm;
pub mod clustering;
pub mod discovery;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod numeric;
pub mod pipeline;
pub mod segmentation;
pub mod synth;
pub mod topics;
pub mod weighting;

pub use error::{Error, Result};
