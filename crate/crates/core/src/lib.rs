//! Desk-scale transformer language models for comparing position methods
//! (none, sinusoidal, rotary, T5 relative bias, ALiBi) on length
//! extrapolation.
//!
//! * [`tensor`]: `f64` tensors with reverse-mode autodiff.
//! * [`position`]: slopes, masks, tables and buckets for every method.
//! * [`model`]: the decoder-only transformer.
//! * [`data`]: byte-level corpora and training windows.
//! * [`train`]: Adam, schedules, training loop, checkpoints.
//! * [`eval`]: nonoverlapping / sliding-window perplexity and sweeps.
//! * [`cli`]: config parsing and the command implementations.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod position;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use eval::{EvalMode, EvalRecord};
pub use model::{Model, ModelConfig, PositionMethod};
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainLog};
