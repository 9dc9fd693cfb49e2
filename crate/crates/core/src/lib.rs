//! Zero-shot table retrieval with a dual encoder.
//!
//! Tables and questions are embedded into one unit-norm space; a question is
//! answered by its nearest tables. Training uses a margin contrastive loss
//! over mined hard negatives and uniform random negatives. A BM25 ranker over
//! table tokens serves as the lexical baseline.

pub mod bm25;
pub mod checkpoint;
mod container;
pub mod corpus;
pub mod embed_store;
pub mod error;
pub mod index;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sampler;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
