//! Exemplar-free lifelong re-identification built around distribution
//! rehearsing: a self-supervised style rehearser that predicts per-image
//! transfer kernels, a lifelong training loop with similarity distillation and
//! model fusion, and a procedurally generated multi-domain benchmark.

pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod image;
pub mod lifelong;
pub mod rehearser;
pub mod reid;
pub mod report;
pub mod rng;
pub mod synthbench;
pub mod tensor;

pub use config::{BenchmarkConfig, ExperimentConfig};
pub use error::{Error, Result};
