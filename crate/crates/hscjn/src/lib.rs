//! Hierarchical recurrent dialogue generation with a per-step
//! future-word-set prediction loss and a maximum-entropy output
//! regularizer, plus the corpus/decoding/evaluation pipeline needed to
//! train, ablate, and measure it.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod decode;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
