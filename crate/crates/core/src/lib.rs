//! Weakly supervised image/text attribute value extraction at toy scale.
//!
//! The pipeline encodes patches and tokens, grounds a question prompt in both
//! modalities and decodes attribute values. Training combines a generation
//! loss with optional label-smoothed momentum contrast, category-supervised
//! patch gating and neighborhood-based sample weights.

pub mod alignment;
pub mod autograd;
pub mod data;
pub mod encoders;
mod error;
pub mod evaluation;
pub mod fusion;
pub mod model;
pub mod neighborhood;
pub mod params;
pub mod pruning;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
