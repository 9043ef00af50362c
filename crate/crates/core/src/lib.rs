//! Continuous emotion recognition over precomputed per-frame visual features.
//!
//! Videos are cut into overlapping fixed-length segments, each segment runs
//! through a dilated causal TCN, a Transformer encoder and a task-specific
//! MLP head, and overlapping predictions are averaged back onto frames.
//! Training uses AdamW with a warmup-then-cosine learning-rate schedule.

pub mod cli;
pub mod datamodel;
pub mod error;
pub mod gradcore;

pub use error::{Error, Result};
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod objectives;
pub mod segmentation;
pub mod trainer;
