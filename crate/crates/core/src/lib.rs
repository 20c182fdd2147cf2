//! Collaborative-filtering-augmented retrieval for personalized text
//! generation.
//!
//! The pipeline retrieves the top-`m` users most similar to the querying
//! user (contrastively trained user embeddings), retrieves the top-`k`
//! documents from each of their histories with a personalized retriever,
//! reranks the `m x k` candidates down to `k`, and builds the generation
//! prompt from them. Retriever and reranker are both distilled from
//! generation-quality feedback.

pub mod checkpoint;
pub mod corpus;
pub mod distribution;
pub mod error;
pub mod feedback;
pub mod http;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod reranker;
pub mod retriever;
pub mod tensor;
pub mod text;
pub mod user_model;

pub use error::{Error, Result};
