//! Configuration, dataset formats and the synthetic attribute suite.

pub mod config;
pub mod container;
mod dataset;
pub mod manifest;
pub mod synth;

pub use config::KvConfig;
pub use container::TensorContainer;
pub use dataset::{Dataset, Labels};
pub use manifest::DatasetManifest;
pub use synth::{generate_synthetic, SynthSet, SynthSpec};
