//! Decoupled-head attention for desk-scale transformers.
//!
//! Converts a multi-head attention model into one with fewer, per-layer key
//! and value heads: head-similarity analysis, grouping search and budget
//! allocation, constrained linear fusion of grouped heads, materialization,
//! and continued training on a synthetic language-modeling task.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix it to one of them.

pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod fusion;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod search;
pub mod task;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type ToyModel64 = model::ToyModel<f64>;
pub type ToyModel32 = model::ToyModel<f32>;
pub type AttentionParams64 = attention::AttentionParams<f64>;
pub type AttentionParams32 = attention::AttentionParams<f32>;
pub type FusionOperator64 = fusion::FusionOperator<f64>;
pub type FusionOperator32 = fusion::FusionOperator<f32>;
