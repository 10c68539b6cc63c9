//! Structured parameter-efficient fine-tuning on a toy CLIP-style dual
//! encoder, with a few-shot continual-learning harness.
//!
//! The method under study selects the attention heads whose parameters
//! carry the largest squared loss gradients, adapts only those heads
//! through masked low-rank factors, and restricts fc1 updates to the
//! largest-gradient entries — then measures what that buys in a
//! continual-learning protocol against LayerNorm-only, full fine-tuning,
//! EWC, plain LoRA, and fc1-only baselines.
//!
//! Start with the `examples/` directory: each file is a runnable tour of
//! one capability (dataset generation, gradient checking, head selection,
//! a training session, a full continual run).

pub mod adapt;
pub mod cli;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod select;
pub mod tensor;
pub mod train;
mod wire;

pub use error::{Error, Result};
