//! Cross-lingual sentence embeddings from a transformer translation model.
//!
//! The encoder's first output position (fed a dedicated start tag) is the
//! sentence embedding; the single-layer decoder only sees that vector. Training
//! mixes translation loss with a norm-balanced margin distance constraint, and
//! the evaluation harness measures zero-shot cross-lingual classification.

pub mod autograd;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use autograd::{AttentionLayout, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::{Scalar, Tensor, TensorError};
