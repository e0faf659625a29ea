use std::io;

use crate::manifest::ComponentId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("record does not match manifest: {0}")]
    ManifestMismatch(String),

    #[error("cache built for different manifest (cache {cache}, manifest {manifest})")]
    HashMismatch { cache: String, manifest: String },

    #[error("pair ({query_id}, {cand_id}) missing from dot cache")]
    MissingPair { query_id: u64, cand_id: u64 },

    #[error("no gradient for sample {0}")]
    MissingGradient(u64),

    #[error("component subset is empty")]
    EmptySubset,

    #[error("component index {0} out of range")]
    UnknownComponent(usize),

    #[error("score tables have different key sets")]
    KeyMismatch,

    #[error("candidate set size {b} exceeds corpus size {n}")]
    SetTooLarge { b: usize, n: usize },

    #[error("projection dimension {dim} is smaller than the component count {components}")]
    DimTooSmall { dim: usize, components: usize },

    #[error("projection config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("empty dot cache")]
    EmptyCache,

    #[error("sample {0} has an empty completion")]
    EmptyCompletion(u64),

    #[error("token {token} out of vocabulary (size {vocab})")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("duplicate component {0}")]
    DuplicateComponent(ComponentId),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
