//! Few-shot text classification with gradient-based task embeddings.
//!
//! A small transformer encoder with bottleneck adapters is trained as a
//! prototypical network (stage 1). A second stage freezes it and learns to
//! modulate the adapters from Fisher-diagonal gradient features computed on
//! each episode's support set.

pub mod adaptation;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod proto;
pub mod taskemb;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
