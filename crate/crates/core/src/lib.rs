//! Byte-level sequence-to-sequence modelling with a gradient-based subword
//! tokenization frontend, on a small tape-based autodiff engine.

pub mod bytes;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gbst;
pub mod gradcheck;
pub mod oracle;
pub mod profiler;
pub mod reference;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};

/// Small English prose corpus bundled for pretraining demos and tests.
pub const TOY_CORPUS: &str = include_str!("../data/toy_corpus.txt");
