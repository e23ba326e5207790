//! Multimodal LoRA training on synthetic multimodal data: a small reverse-mode
//! autodiff engine, per-modality encoders with low-rank adapters, the
//! unimodal/ensemble/fusion baselines, checkpoints and an experiment harness.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod nn;
pub mod seed;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
