//! Query answering over long documents via hierarchical document trees.
//!
//! The pipeline chunks a document into fixed-token slices, parses each chunk
//! into structured subtrees with a chat backend, aggregates subtree roots
//! bottom-up (embed, cluster, summarize until the cluster count stabilizes)
//! into a layered DocTree, and answers queries by recursive map/reduce
//! reasoning over the tree with confidence-based conflict resolution.
//! Baseline strategies (full-document, retrieval-augmented) and an
//! evaluation harness (token F1, Rouge-L, multiple-choice accuracy) share
//! the same gateways.
//!
//! Vector math and clustering are generic over the scalar type; the
//! pipeline itself runs on the [`Real`] alias.

pub mod baseline;
pub mod chunking;
pub mod cluster;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod parser;
pub mod reason;
pub mod scalar;
pub mod trace;
pub mod tree;
pub mod vector;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar the pipeline runs on.
pub type Real = f64;

/// Embedding vector at the pipeline's scalar width.
pub type EmbeddingVector = vector::Embedding<Real>;
