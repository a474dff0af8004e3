//! Chunk-level KV cache reuse for retrieval-augmented generation.
//!
//! The crate covers the whole path from a chunked knowledge base to an
//! answer: isolated and similarity-fused offline chunk caches, online
//! stitching with RoPE re-positioning, deviation- and query-guided critical
//! token selection, a Q-index sparse attention kernel, a tiered cache store
//! with alternative-path matching, and an asynchronous load/compute
//! scheduler. A tiny seeded transformer stands in for the served model.

mod bytes;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod kv;
pub mod kv_store;
pub mod metrics;
pub mod model;
pub mod preprocessing;
pub mod reprocessing;
pub mod rope;
pub mod scheduler;
pub mod sparse_attention;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
