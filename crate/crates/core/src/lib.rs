//! Knowledge distillation for toy CLIP dual encoders.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the element type for the common cases.

pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod grads;
pub mod losses;
pub mod numcore;
pub mod scalar;
pub mod trainkit;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = numcore::Matrix<f64>;
pub type Matrix32 = numcore::Matrix<f32>;
pub type EmbeddingBatch64 = losses::EmbeddingBatch<f64>;
pub type EmbeddingBatch32 = losses::EmbeddingBatch<f32>;
pub type ClipModel64 = encoders::ClipModel<f64>;
pub type ClipModel32 = encoders::ClipModel<f32>;
pub type GradField64 = grads::GradField<f64>;
pub type PairBatch64 = data::PairBatch<f64>;
pub type PairBatch32 = data::PairBatch<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
