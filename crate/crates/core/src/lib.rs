//! Two-branch causal/spurious disentangling classifier for multi-label image
//! diagnosis under domain shift.
//!
//! The disease branch and the domain branch each split their embeddings into a
//! causal and a spurious part through a complementary cross-attention readout.
//! Training mixes classification, uniformity, backdoor-intervention, relational
//! and batch-contrastive terms with an optional causal-graph prior on the disease
//! embeddings.

pub mod ablation;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod intervention;
pub mod losses;
pub mod model;
pub mod prior;
pub mod relational;
pub mod train;

pub use error::{Error, Result};
