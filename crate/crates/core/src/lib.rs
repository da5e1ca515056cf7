//! Curation of vision-language instruction data by image relevance.
//!
//! Candidate question-answer samples are scored by how much the image
//! changes a model's per-token answer probabilities. The highest-scoring
//! fraction trains a generator with cross-entropy; per-image positive and
//! negative pseudo-labels train it contrastively; the generator then
//! regenerates the data.

pub mod contrastive;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod relevance;
pub mod world;

pub use error::{Error, Result};
