//! Second-stage summary fusion at desk scale.
//!
//! A small encoder-decoder is trained as a first-stage summarizer and
//! produces diverse-beam candidates; a fusion model then encodes the source
//! and every candidate separately, concatenates the token states along the
//! sequence dimension, and decodes a new summary under a joint generation
//! and candidate-classification loss.
//!
//! The numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod analysis;
pub mod backbone;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision backbone used for training runs.
pub type Backbone32 = backbone::Backbone<f32>;
/// Double-precision backbone used for gradient checks.
pub type Backbone64 = backbone::Backbone<f64>;
/// Single-precision fusion model used for training runs.
pub type Fusion32 = fusion::FusionModel<f32>;
/// Double-precision fusion model used for gradient checks.
pub type Fusion64 = fusion::FusionModel<f64>;
