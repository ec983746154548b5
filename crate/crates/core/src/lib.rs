//! Contrastive self-supervised pretraining with batch and feature mixup, a
//! momentum teacher and a memory queue of negatives, plus the evaluation
//! harness used to measure the pretrained encoder.

pub mod augment;
pub mod data_io;
pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod contrast;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod mixup;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
