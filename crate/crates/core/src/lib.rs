//! dynlora: a self-contained engine for parameter-efficient fine-tuning
//! experiments, built around low-rank adapters whose capacity is
//! reallocated across layers during training.

pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod data;
pub mod error;
pub mod importance;
pub mod lora;
pub mod matrix;
pub mod metrics;
pub mod network;
pub mod rank;
pub mod report;
pub mod rng;
pub mod strategy;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
