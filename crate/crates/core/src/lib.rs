//! Decoder-only transformer text recognition.
//!
//! A text image is cut into patches, projected into the model dimension,
//! followed by a `[SEP]` token, and a causal transformer decoder then emits the
//! recognized text token by token until `[EOS]`.

pub mod checkpoint;
pub mod dataset;
pub mod decoder;
pub mod embedding;
pub mod error;
pub mod generate;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synthgen;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
