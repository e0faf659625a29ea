//! Aggregation and reporting: per-kind means, depth profiles, comparison
//! curves and the benchmark report.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{ComponentId, ComponentKind};
use crate::projection::ProjectionConfig;
use crate::selection::{SelectionTrace, Sweep};
use crate::toybench::Setting;

/// Mean value per component kind across layers. The embedding is its own row.
pub fn per_kind_means(sweep: &[(ComponentId, f64)]) -> Result<BTreeMap<ComponentKind, f64>> {
    if sweep.is_empty() {
        return Err(Error::Invalid("empty sweep".into()));
    }
    let mut sums: BTreeMap<ComponentKind, (f64, usize)> = BTreeMap::new();
    for (id, v) in sweep {
        let e = sums.entry(id.kind).or_default();
        e.0 += v;
        e.1 += 1;
    }
    Ok(sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}

/// Layer x kind table; the embedding has no depth and is left out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthProfile {
    pub layers: Vec<i32>,
    pub kinds: Vec<ComponentKind>,
    /// `values[layer_row][kind_col]`, `None` where a layer lacks that kind.
    pub values: Vec<Vec<Option<f64>>>,
}

impl DepthProfile {
    pub fn get(&self, layer: i32, kind: ComponentKind) -> Option<f64> {
        let r = self.layers.iter().position(|&l| l == layer)?;
        let c = self.kinds.iter().position(|&k| k == kind)?;
        self.values[r][c]
    }

    /// Column means, which reproduce the per-kind means of the layer kinds.
    pub fn kind_means(&self) -> BTreeMap<ComponentKind, f64> {
        self.kinds
            .iter()
            .enumerate()
            .filter_map(|(c, &k)| {
                let col: Vec<f64> = self.values.iter().filter_map(|row| row[c]).collect();
                (!col.is_empty()).then(|| (k, col.iter().sum::<f64>() / col.len() as f64))
            })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut head = vec!["layer".to_string()];
        head.extend(self.kinds.iter().map(|k| k.name().to_string()));
        w.write_record(&head)?;
        for (l, row) in self.layers.iter().zip(&self.values) {
            let mut rec = vec![l.to_string()];
            rec.extend(row.iter().map(|v| v.map_or(String::new(), |v| format!("{v:e}"))));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn depth_profile(sweep: &[(ComponentId, f64)]) -> DepthProfile {
    let mut layers: Vec<i32> = sweep.iter().filter(|(id, _)| !id.is_embedding()).map(|(id, _)| id.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    let kinds = ComponentKind::LAYER_KINDS.to_vec();
    let mut values = vec![vec![None; kinds.len()]; layers.len()];
    for (id, v) in sweep.iter().filter(|(id, _)| !id.is_embedding()) {
        let r = layers.binary_search(&id.layer).unwrap();
        let c = kinds.iter().position(|&k| k == id.kind).unwrap();
        values[r][c] = Some(*v);
    }
    DepthProfile { layers, kinds, values }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    /// (cumulative parameter fraction, accuracy)
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveBundle {
    pub series: Vec<Series>,
    pub full_baseline: f64,
}

impl CurveBundle {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Greedy traces (accuracy after each step) and random-projection points on a
/// shared parameter-fraction axis, plus the full-gradient reference line.
pub fn compare_curves(
    traces: &[(String, &SelectionTrace)],
    rp_points: &[(f64, f64)],
    full_baseline: f64,
) -> Result<CurveBundle> {
    if traces.is_empty() && rp_points.is_empty() {
        return Err(Error::Invalid("nothing to compare".into()));
    }
    let mut series: Vec<Series> = traces
        .iter()
        .map(|(label, t)| Series {
            label: label.clone(),
            points: t.steps.iter().map(|s| (s.cumulative_param_fraction, s.accuracy)).collect(),
        })
        .collect();
    if !rp_points.is_empty() {
        let mut points = rp_points.to_vec();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        series.push(Series { label: "random projection".into(), points });
    }
    Ok(CurveBundle { series, full_baseline })
}

/// What stands in for the full gradient in a benchmark run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Surrogate {
    Full,
    Subset(Vec<ComponentId>),
    Greedy { objective: crate::selection::Objective, prefix: usize },
    Projection(ProjectionConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
    /// Whether the stage consumed results cached by an earlier stage.
    pub cached: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub setting: Setting,
    pub surrogate: Surrogate,
    pub accuracy: f64,
    pub full_accuracy: f64,
    pub per_component: Option<Sweep>,
    pub trace: Option<SelectionTrace>,
    pub projection_points: Vec<(f64, f64)>,
    pub timings: Vec<StageTiming>,
    pub metadata: BTreeMap<String, String>,
}

impl BenchmarkReport {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.accuracy) || !(0.0..=1.0).contains(&self.full_accuracy) {
            return Err(Error::Format("accuracy outside [0, 1]".into()));
        }
        if self.timings.iter().any(|t| t.seconds.is_nan() || t.seconds < 0.0) {
            return Err(Error::Format("negative stage timing".into()));
        }
        Ok(())
    }

    pub fn timing(&self, stage: &str) -> Option<f64> {
        self.timings.iter().find(|t| t.stage == stage).map(|t| t.seconds)
    }

    /// The report with timings removed, for determinism comparisons.
    pub fn without_timings(&self) -> Self {
        BenchmarkReport { timings: Vec::new(), ..self.clone() }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Reads a sweep CSV (as written by [`Sweep::write_csv`]) back into pairs.
pub fn read_sweep_csv(path: impl AsRef<Path>) -> Result<Vec<(ComponentId, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id = rec.get(0).and_then(ComponentId::parse).ok_or_else(|| Error::Format("bad component column".into()))?;
        let v: f64 = rec.get(3).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Format("bad value column".into()))?;
        out.push((id, v));
    }
    Ok(out)
}
