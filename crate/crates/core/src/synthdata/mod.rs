//! Seeded synthetic multimodal classification data.

mod config;
mod dataset;
mod probe;

pub use config::SynthConfig;
pub use dataset::{batch_iter, generate, Batch, BatchIter, MultiModalDataset, Split, Splits};
pub use probe::{bayes_probe, probe_datasets, ProbeReport};
