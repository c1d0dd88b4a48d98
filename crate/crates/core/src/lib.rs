//! Continual instance segmentation with per-step feature extractors, a
//! shared class-incremental head and distillation through a shared
//! feature extractor.

pub mod error;
pub mod mask;
pub mod scenario;
pub mod dataset;
pub mod shapes;
pub mod nn;
pub mod losses;
pub mod model;
pub mod train;
pub mod infer;
pub mod analysis;
pub mod averaging;
pub mod plot;
pub mod cli;
pub mod experiment;

pub use error::{Error, Result};
