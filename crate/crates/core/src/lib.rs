//! Neural machine translation with a deconvolution-based global context decoder.
//!
//! A bidirectional LSTM encoder feeds two decoders: a stack of transposed
//! convolutions that expands the final encoder states into a fixed-size matrix
//! of target-side word embeddings, and an attentional LSTM decoder that reads
//! both the source annotations and that matrix while it generates.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod deconv;
pub mod decoder;
pub mod decoding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
