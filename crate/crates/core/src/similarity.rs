//! Subset cosine reconstruction from cached dot products, batch score tables,
//! retrieval accuracy and score-vector alignment.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::candidates::CandidateSet;
use crate::dot_cache::{DotCache, PairKey};
use crate::error::{Error, Result};
use crate::par::{self, Parallelism};

pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityParams {
    pub epsilon: f64,
}

impl Default for SimilarityParams {
    fn default() -> Self {
        SimilarityParams { epsilon: DEFAULT_EPSILON }
    }
}

impl SimilarityParams {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(Error::Invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(SimilarityParams { epsilon })
    }
}

/// A nonempty set of manifest component indices, kept sorted.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Subset(Vec<usize>);

impl Subset {
    pub fn new(mut indices: Vec<usize>, n_components: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(Error::EmptySubset);
        }
        if let Some(&bad) = indices.iter().find(|&&k| k >= n_components) {
            return Err(Error::UnknownComponent(bad));
        }
        Ok(Subset(indices))
    }

    pub fn all(n_components: usize) -> Self {
        Subset((0..n_components).collect())
    }

    pub fn single(k: usize) -> Self {
        Subset(vec![k])
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self, row: &[f64]) -> f64 {
        self.0.iter().map(|&k| row[k]).sum()
    }
}

/// `dot / (sqrt(query_sq) * sqrt(cand_sq) + eps)`.
#[inline]
pub fn cosine_from_parts(dot: f64, query_sq: f64, cand_sq: f64, epsilon: f64) -> f64 {
    dot / (query_sq.sqrt() * cand_sq.sqrt() + epsilon)
}

pub fn reconstruct_cosine(
    cache: &DotCache,
    query_id: u64,
    cand_id: u64,
    subset: &Subset,
    params: SimilarityParams,
) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    if let Some(&bad) = subset.indices().iter().find(|&&k| k >= cache.n_components) {
        return Err(Error::UnknownComponent(bad));
    }
    let row = cache.pair(query_id, cand_id)?;
    let q = cache.query_norms(query_id)?;
    let c = cache.cand_norms(cand_id)?;
    Ok(cosine_from_parts(subset.sum(row), subset.sum(q), subset.sum(c), params.epsilon))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub scores: BTreeMap<PairKey, f64>,
    /// Component subset that produced the scores; `None` for projected tables.
    pub subset: Option<Subset>,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, query_id: u64, cand_id: u64) -> Result<f64> {
        self.scores.get(&PairKey::new(query_id, cand_id)).copied().ok_or(Error::MissingPair { query_id, cand_id })
    }

    /// Scores in canonical (query_id, cand_id) order.
    pub fn vector(&self) -> Vec<f64> {
        self.scores.values().copied().collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["query_id", "cand_id", "score"])?;
        for (k, s) in &self.scores {
            w.write_record([k.query_id.to_string(), k.cand_id.to_string(), format!("{s:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reconstructed cosine for every pair named by `cand_sets`.
pub fn score_table(
    cache: &DotCache,
    cand_sets: &[CandidateSet],
    subset: &Subset,
    params: SimilarityParams,
    mode: Parallelism,
) -> Result<ScoreTable> {
    let rows = par::try_map_slice(mode, cand_sets, |cs| {
        cs.members
            .iter()
            .map(|&j| Ok((PairKey::new(cs.query_id, j), reconstruct_cosine(cache, cs.query_id, j, subset, params)?)))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(ScoreTable { scores: rows.into_iter().flatten().collect(), subset: Some(subset.clone()) })
}

/// Whether the original outscores every distractor. Ties count as failure.
#[inline]
pub fn retrieved(true_score: f64, distractors: impl IntoIterator<Item = f64>) -> bool {
    let best = distractors.into_iter().fold(f64::NEG_INFINITY, f64::max);
    true_score > best
}

/// Fraction of queries whose original (cand id == query id) strictly
/// outscores every other member of its candidate set.
pub fn accuracy_from_table(table: &ScoreTable, cand_sets: &[CandidateSet]) -> Result<f64> {
    if cand_sets.is_empty() {
        return Err(Error::Invalid("no candidate sets".into()));
    }
    let mut hits = 0usize;
    for cs in cand_sets {
        let own = table.get(cs.query_id, cs.query_id)?;
        let others = cs.distractors().map(|j| table.get(cs.query_id, j)).collect::<Result<Vec<_>>>()?;
        if retrieved(own, others) {
            hits += 1;
        }
    }
    Ok(hits as f64 / cand_sets.len() as f64)
}

/// Cosine similarity between two score vectors over identical key sets.
pub fn vector_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// How closely a subset's scores track the full-gradient scores.
pub fn alignment(table: &ScoreTable, full: &ScoreTable) -> Result<f64> {
    if table.scores.len() != full.scores.len() || table.scores.keys().zip(full.scores.keys()).any(|(a, b)| a != b) {
        return Err(Error::KeyMismatch);
    }
    Ok(vector_cosine(&table.vector(), &full.vector()))
}
