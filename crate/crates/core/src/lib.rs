//! Retrieval-augmented lay paraphrasing of French medical terms: corpus and
//! knowledge-base construction, embedding, retrieval, generation, automatic
//! and manual evaluation.

pub mod agreement;
pub mod annotate;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod orchestrator;
pub mod retriever;

pub use error::{Error, Result};
