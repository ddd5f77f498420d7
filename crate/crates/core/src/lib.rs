//! Temporal graph recommender.
//!
//! Per-node memories are updated by a gated recurrent cell over interaction
//! messages, node embeddings aggregate recent temporal neighbors (attention,
//! sum, or graph-conv), and training optimizes a pairwise ranking loss with
//! time-aware negative sampling. Evaluation streams events chronologically:
//! each interaction is ranked against sampled negatives before the model is
//! allowed to see it.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod memory;
pub mod model;
pub mod optim;
pub mod params;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
