//! Desk-scale dual-encoder classification lab.
//!
//! A frozen toy vision/language encoder pair maps images and token
//! sequences into one latent space; six inference heads share the
//! similarity backbone: zero-shot retrieval, prompt ensembling, linear
//! probing, learned-prefix prompting, target optimization, and a trainable
//! query bank with a linear classification layer. Everything is generic
//! over the scalar type; `f64` is the default and `f32` is selectable.

// pub mod config;
// pub mod data;
// pub mod encoder;
pub mod error;
// pub mod eval;
pub mod gradcheck;
// pub mod protocol;
// pub mod records;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
// pub mod tokenizer;
// pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

/// Default-precision aliases for the main types.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = tape::Graph<f64>;

/// Single-precision aliases.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph32 = tape::Graph<f32>;
