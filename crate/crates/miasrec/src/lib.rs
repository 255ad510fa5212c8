//! Multi-intent session-based recommender.
//!
//! Pipeline: raw interaction logs -> preprocessed session corpus -> prefix
//! examples -> multi-intent model (position/frequency embeddings, self
//! attention, highway gate, alpha-entmax intent selection, cosine decoding)
//! -> ranked next-item predictions with Recall@K / MRR@K reporting.

pub mod entmax;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod runconfig;
pub mod sessions;
pub mod training;

pub use error::{Error, Result};
