// SPDX-License-Identifier: MIT OR Apache-2.0

//! Spectral key-embedding editing for attention steering.
//!
//! Relevance subspaces are learned offline from the cross-covariance of key
//! embeddings under neutral and question-conditioned prompts. At inference
//! the keys of highlighted tokens are pushed along those subspaces before
//! attention scores are formed. A deterministic grouped-query-attention toy
//! transformer serves as the backend.

pub mod adaseka;
pub mod cli;
pub mod data;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod spectral;
pub mod steering;

pub use error::{Result, SekaError};
