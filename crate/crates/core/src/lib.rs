//! Literature-augmented outcome prediction.
//!
//! A case note is turned into a negation-filtered MeSH query, candidate
//! abstracts are pulled from an outcome-specific index by sparse TF-IDF and
//! dense Euclidean retrieval, pooled and rescored by a pair scorer, and the
//! top-k evidence is fused with the note representation by one of several
//! aggregation strategies to predict the outcome.

pub mod codec;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod judgments;
pub mod mesh;
pub mod negation;
pub mod note;
pub mod pipeline;
pub mod predictor;
pub mod provider;
pub mod rerank;
pub mod retrieval;
pub mod text;

pub use error::{Error, Result};
