//! Gradient-based instance attribution for language models.
//!
//! Per-sample loss gradients are stored per component tensor. Component-wise
//! dot products between query and candidate gradients are cached once, after
//! which the cosine similarity of any component subset can be rebuilt
//! exactly. On top of that cache the crate runs forward greedy component
//! selection, and compares it against component-wise random projection on a
//! retrieval benchmark: a query (a paraphrase or a model-generated variant of
//! a training sample) should find its original among BM25 candidates.
//!
//! With the default `parallel` feature the data-parallel loops run on rayon;
//! without it every [`par::Parallelism`] falls back to sequential execution.
//! Results are identical either way.

pub mod candidates;
pub mod dot_cache;
pub mod error;
pub mod evaluation;
pub mod manifest;
pub mod par;
pub mod projection;
pub mod selection;
pub mod similarity;
pub mod store;
pub mod toybench;

pub use error::{Error, Result};
pub use manifest::{ComponentId, ComponentKind, ComponentManifest, GradientRecord};
pub use par::Parallelism;
