//! Online backfilling for embedding-model upgrades.
//!
//! Queries are answered by two systems while the gallery is re-embedded: the
//! old model's embeddings for items not yet backfilled and the new model's for
//! the rest. The two ranked lists are merged by distance. A learned reverse
//! transform ψ maps new-model queries into the old space, so each query needs
//! a single new-model forward pass, and contrastive training calibrates the
//! two systems' distances against each other.

pub mod error;
pub mod experiment;
pub mod losses;
pub mod merge;
pub mod metrics;
pub mod nn;
pub mod retrieval;
pub mod store;
pub mod synthetic;

pub use error::{Error, Result};
