//! Forward greedy component selection over a dot-product cache.
//!
//! The search never touches gradient files: every objective evaluation is a
//! pass over cached scalars plus running accumulators of the already
//! selected components.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::candidates::CandidateSet;
use crate::dot_cache::{DotCache, PairKey};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::manifest::{ComponentId, ComponentKind, ComponentManifest};
use crate::par::{self, Parallelism};
use crate::similarity::{self, cosine_from_parts, SimilarityParams, Subset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    /// Retrieval accuracy over the candidate sets.
    Accuracy,
    /// Cosine between the subset's score vector and the full-gradient one.
    Alignment,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Objective::Accuracy),
            "alignment" => Ok(Objective::Alignment),
            _ => Err(Error::Invalid(format!("unknown objective {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Budget {
    /// Stop after this many components.
    Components(usize),
    /// Only admit components that keep the selected parameter fraction at or
    /// below this value.
    ParamFraction(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub component: ComponentId,
    pub component_index: usize,
    pub objective_value: f64,
    pub best_so_far: f64,
    /// Retrieval accuracy of the selected set after this step.
    pub accuracy: f64,
    pub cumulative_params: usize,
    pub cumulative_param_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub objective: Objective,
    pub steps: Vec<TraceStep>,
}

impl SelectionTrace {
    /// Length and objective value of the best prefix (earliest on ties).
    pub fn best_prefix(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, s) in self.steps.iter().enumerate() {
            if best.is_none_or(|(_, v)| s.objective_value > v) {
                best = Some((i + 1, s.objective_value));
            }
        }
        best
    }

    /// Prefix with the highest retrieval accuracy (earliest on ties).
    pub fn best_accuracy_prefix(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, s) in self.steps.iter().enumerate() {
            if best.is_none_or(|(_, v)| s.accuracy > v) {
                best = Some((i + 1, s.accuracy));
            }
        }
        best
    }

    pub fn subset(&self, len: usize, n_components: usize) -> Result<Subset> {
        Subset::new(self.steps.iter().take(len).map(|s| s.component_index).collect(), n_components)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "step",
            "component",
            "objective_value",
            "best_so_far",
            "accuracy",
            "cumulative_params",
            "cumulative_param_fraction",
        ])?;
        for (i, s) in self.steps.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                s.component.to_string(),
                format!("{:e}", s.objective_value),
                format!("{:e}", s.best_so_far),
                format!("{:e}", s.accuracy),
                s.cumulative_params.to_string(),
                format!("{:e}", s.cumulative_param_fraction),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, objective: Objective, manifest: &ComponentManifest) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut steps = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).ok_or_else(|| Error::Format(format!("trace row missing column {i}")));
            let num = |i: usize| -> Result<f64> {
                field(i)?.parse().map_err(|_| Error::Format(format!("bad number in column {i}")))
            };
            let component =
                ComponentId::parse(field(1)?).ok_or_else(|| Error::Format(format!("bad component {:?}", field(1))))?;
            let component_index =
                manifest.index_of(component).ok_or_else(|| Error::Format(format!("{component} not in manifest")))?;
            steps.push(TraceStep {
                component,
                component_index,
                objective_value: num(2)?,
                best_so_far: num(3)?,
                accuracy: num(4)?,
                cumulative_params: field(5)?.parse().map_err(|_| Error::Format("bad param count".into()))?,
                cumulative_param_fraction: num(6)?,
            });
        }
        Ok(SelectionTrace { objective, steps })
    }
}

/// Dense, index-addressed view of the cache restricted to the candidate sets.
struct Dense {
    k: usize,
    /// pair rows in canonical (query_id, cand_id) order
    pair_dots: Vec<f64>,
    pair_query: Vec<usize>,
    pair_cand: Vec<usize>,
    query_sq: Vec<f64>,
    cand_sq: Vec<f64>,
    /// per query: index of the original pair and of its distractor pairs
    queries: Vec<(usize, Vec<usize>)>,
    epsilon: f64,
}

impl Dense {
    fn new(cache: &DotCache, cand_sets: &[CandidateSet], params: SimilarityParams) -> Result<Self> {
        if cand_sets.is_empty() || cache.is_empty() {
            return Err(Error::EmptyCache);
        }
        let k = cache.n_components;
        let mut keys = Vec::new();
        for cs in cand_sets {
            if !cs.contains(cs.query_id) {
                return Err(Error::Invalid(format!("candidate set of query {} lacks its original", cs.query_id)));
            }
            keys.extend(cs.members.iter().map(|&j| PairKey::new(cs.query_id, j)));
        }
        keys.sort();
        keys.dedup();
        let pair_pos: BTreeMap<PairKey, usize> = keys.iter().enumerate().map(|(p, &key)| (key, p)).collect();

        let mut qpos = BTreeMap::new();
        let mut cpos = BTreeMap::new();
        let (mut query_sq, mut cand_sq) = (Vec::new(), Vec::new());
        let mut pair_dots = Vec::with_capacity(keys.len() * k);
        let (mut pair_query, mut pair_cand) = (Vec::new(), Vec::new());
        for key in &keys {
            pair_dots.extend_from_slice(cache.pair(key.query_id, key.cand_id)?);
            let q = *qpos.entry(key.query_id).or_insert_with(|| query_sq.len() / k.max(1));
            if q * k == query_sq.len() {
                query_sq.extend_from_slice(cache.query_norms(key.query_id)?);
            }
            let c = *cpos.entry(key.cand_id).or_insert_with(|| cand_sq.len() / k.max(1));
            if c * k == cand_sq.len() {
                cand_sq.extend_from_slice(cache.cand_norms(key.cand_id)?);
            }
            pair_query.push(q);
            pair_cand.push(c);
        }
        let queries = cand_sets
            .iter()
            .map(|cs| {
                let own = pair_pos[&PairKey::new(cs.query_id, cs.query_id)];
                let others = cs.distractors().map(|j| pair_pos[&PairKey::new(cs.query_id, j)]).collect();
                (own, others)
            })
            .collect();
        Ok(Dense { k, pair_dots, pair_query, pair_cand, query_sq, cand_sq, queries, epsilon: params.epsilon })
    }

    fn n_pairs(&self) -> usize {
        self.pair_query.len()
    }

    /// Scores of every pair for the accumulated set plus optional component.
    fn scores(&self, acc: &Accumulators, extra: Option<usize>) -> Vec<f64> {
        let k = self.k;
        (0..self.n_pairs())
            .map(|p| {
                let (q, c) = (self.pair_query[p], self.pair_cand[p]);
                let (mut dot, mut qq, mut cc) = (acc.pair[p], acc.query[q], acc.cand[c]);
                if let Some(e) = extra {
                    dot += self.pair_dots[p * k + e];
                    qq += self.query_sq[q * k + e];
                    cc += self.cand_sq[c * k + e];
                }
                cosine_from_parts(dot, qq, cc, self.epsilon)
            })
            .collect()
    }

    fn accuracy(&self, scores: &[f64]) -> f64 {
        let hits = self
            .queries
            .iter()
            .filter(|(own, others)| similarity::retrieved(scores[*own], others.iter().map(|&p| scores[p])))
            .count();
        hits as f64 / self.queries.len() as f64
    }
}

#[derive(Clone)]
struct Accumulators {
    pair: Vec<f64>,
    query: Vec<f64>,
    cand: Vec<f64>,
}

impl Accumulators {
    fn zero(d: &Dense) -> Self {
        Accumulators {
            pair: vec![0.0; d.n_pairs()],
            query: vec![0.0; d.query_sq.len() / d.k],
            cand: vec![0.0; d.cand_sq.len() / d.k],
        }
    }

    fn add(&mut self, d: &Dense, comp: usize) {
        let k = d.k;
        for (p, v) in self.pair.iter_mut().enumerate() {
            *v += d.pair_dots[p * k + comp];
        }
        for (q, v) in self.query.iter_mut().enumerate() {
            *v += d.query_sq[q * k + comp];
        }
        for (c, v) in self.cand.iter_mut().enumerate() {
            *v += d.cand_sq[c * k + comp];
        }
    }
}

struct Evaluator {
    dense: Dense,
    full_scores: Option<Vec<f64>>,
}

impl Evaluator {
    fn new(
        cache: &DotCache,
        cand_sets: &[CandidateSet],
        params: SimilarityParams,
        objective: Objective,
    ) -> Result<Self> {
        let dense = Dense::new(cache, cand_sets, params)?;
        let full_scores = match objective {
            Objective::Accuracy => None,
            Objective::Alignment => {
                let mut all = Accumulators::zero(&dense);
                for c in 0..dense.k {
                    all.add(&dense, c);
                }
                Some(dense.scores(&all, None))
            }
        };
        Ok(Evaluator { dense, full_scores })
    }

    fn value(&self, scores: &[f64]) -> f64 {
        match &self.full_scores {
            None => self.dense.accuracy(scores),
            Some(full) => similarity::vector_cosine(scores, full),
        }
    }

    fn eval_with(&self, acc: &Accumulators, extra: usize) -> f64 {
        self.value(&self.dense.scores(acc, Some(extra)))
    }
}

/// Objective value of every singleton subset, in manifest order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub objective: Objective,
    pub values: Vec<(ComponentId, f64)>,
}

impl Sweep {
    /// Best singleton; ties go to the smallest (layer, kind).
    pub fn argmax(&self) -> Option<(ComponentId, f64)> {
        self.values.iter().copied().fold(None, |best, (id, v)| match best {
            Some((bid, bv)) if bv > v || (bv == v && bid < id) => Some((bid, bv)),
            _ => Some((id, v)),
        })
    }

    pub fn per_kind_means(&self) -> Result<BTreeMap<ComponentKind, f64>> {
        evaluation::per_kind_means(&self.values)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["component", "layer", "kind", "value"])?;
        for (id, v) in &self.values {
            w.write_record([id.to_string(), id.layer.to_string(), id.kind.name().to_string(), format!("{v:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn single_component_sweep(
    manifest: &ComponentManifest,
    cache: &DotCache,
    cand_sets: &[CandidateSet],
    params: SimilarityParams,
    objective: Objective,
    mode: Parallelism,
) -> Result<Sweep> {
    check_cache(manifest, cache)?;
    let ev = Evaluator::new(cache, cand_sets, params, objective)?;
    let zero = Accumulators::zero(&ev.dense);
    let values = par::map_range(mode, manifest.len(), |c| ev.eval_with(&zero, c));
    Ok(Sweep { objective, values: manifest.ids().zip(values).collect() })
}

fn check_cache(manifest: &ComponentManifest, cache: &DotCache) -> Result<()> {
    cache.check_manifest(manifest)?;
    if cache.n_components != manifest.len() {
        return Err(Error::Format("cache component count disagrees with manifest".into()));
    }
    Ok(())
}

pub fn greedy_select(
    manifest: &ComponentManifest,
    cache: &DotCache,
    cand_sets: &[CandidateSet],
    params: SimilarityParams,
    objective: Objective,
    budget: Budget,
    mode: Parallelism,
) -> Result<SelectionTrace> {
    check_cache(manifest, cache)?;
    let ev = Evaluator::new(cache, cand_sets, params, objective)?;
    let n = manifest.len();
    let counts = manifest.param_counts();
    let total = manifest.total_params;
    let (max_steps, max_params) = match budget {
        Budget::Components(c) if c >= 1 => (c.min(n), total),
        Budget::Components(_) => return Err(Error::Invalid("budget must allow at least one component".into())),
        Budget::ParamFraction(f) if f > 0.0 => (n, (f * total as f64).floor() as usize),
        Budget::ParamFraction(f) => return Err(Error::Invalid(format!("parameter fraction {f} must be positive"))),
    };

    let mut acc = Accumulators::zero(&ev.dense);
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut steps: Vec<TraceStep> = Vec::new();
    let mut used = 0usize;
    while steps.len() < max_steps {
        let admissible: Vec<usize> = remaining.iter().copied().filter(|&c| used + counts[c] <= max_params).collect();
        if admissible.is_empty() {
            break;
        }
        let values = par::map_slice(mode, &admissible, |&c| ev.eval_with(&acc, c));
        let mut best: Option<(usize, f64)> = None;
        for (&c, &v) in admissible.iter().zip(&values) {
            best = match best {
                Some((bc, bv)) if bv > v || (bv == v && manifest.components[bc].id < manifest.components[c].id) => {
                    Some((bc, bv))
                }
                _ => Some((c, v)),
            };
        }
        let (chosen, value) = best.unwrap();
        acc.add(&ev.dense, chosen);
        remaining.retain(|&c| c != chosen);
        used += counts[chosen];
        let accuracy = match objective {
            Objective::Accuracy => value,
            Objective::Alignment => ev.dense.accuracy(&ev.dense.scores(&acc, None)),
        };
        let best_so_far = steps.last().map_or(value, |s| s.best_so_far.max(value));
        steps.push(TraceStep {
            component: manifest.components[chosen].id,
            component_index: chosen,
            objective_value: value,
            best_so_far,
            accuracy,
            cumulative_params: used,
            cumulative_param_fraction: used as f64 / total as f64,
        });
    }
    if steps.is_empty() {
        return Err(Error::Invalid("no component fits the parameter budget".into()));
    }
    Ok(SelectionTrace { objective, steps })
}

/// Retrieval accuracy of a fixed subset, through the shared score-table path.
pub fn evaluate_subset(
    cache: &DotCache,
    cand_sets: &[CandidateSet],
    subset: &Subset,
    params: SimilarityParams,
) -> Result<f64> {
    let table = similarity::score_table(cache, cand_sets, subset, params, Parallelism::Sequential)?;
    similarity::accuracy_from_table(&table, cand_sets)
}
