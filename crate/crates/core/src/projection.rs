//! Component-wise random projection.
//!
//! Each component block `v_k` is mapped to `R_k v_k / sqrt(d_k)` where `R_k`
//! is a `d_k x n_k` random sign (or Gaussian) matrix. `R_k` is never stored:
//! every entry is a pure function of `(seed, component, row, column)` drawn
//! from a ChaCha8 stream whose key is `(seed, component)`, whose stream id is
//! the row, and whose word position is derived from the 64-column chunk.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::candidates::CandidateSet;
use crate::dot_cache::PairKey;
use crate::error::{Error, Result};
use crate::manifest::{ComponentManifest, GradientRecord};
use crate::par::{self, Parallelism};
use crate::similarity::{cosine_from_parts, ScoreTable, SimilarityParams};
use crate::store::{GradientReader, RawReader, RawWriter};

pub const PROJECTED_MAGIC: [u8; 4] = *b"GSP1";
const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Distribution {
    Rademacher,
    Gaussian,
}

impl Distribution {
    /// 32-bit ChaCha words consumed per 64-column chunk.
    fn words_per_chunk(self) -> u128 {
        match self {
            Distribution::Rademacher => 2,
            Distribution::Gaussian => 2 * CHUNK as u128,
        }
    }
}

impl std::str::FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rademacher" => Ok(Distribution::Rademacher),
            "gaussian" => Ok(Distribution::Gaussian),
            _ => Err(Error::Invalid(format!("unknown distribution {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub total_dim: usize,
    pub per_component_dims: Vec<usize>,
    pub seed: u64,
    pub distribution: Distribution,
    pub manifest_hash: String,
}

impl ProjectionConfig {
    pub fn new(manifest: &ComponentManifest, total_dim: usize, seed: u64, distribution: Distribution) -> Result<Self> {
        Ok(ProjectionConfig {
            total_dim,
            per_component_dims: allocate_dims(manifest, total_dim)?,
            seed,
            distribution,
            manifest_hash: manifest.hash(),
        })
    }

    /// Dimension for a fraction of the manifest's parameter count, rounded
    /// to nearest and raised to at least one row per component.
    pub fn dim_for_fraction(manifest: &ComponentManifest, fraction: f64) -> Result<usize> {
        if fraction.is_nan() || fraction <= 0.0 {
            return Err(Error::Invalid(format!("projection fraction {fraction} must be positive")));
        }
        Ok(((fraction * manifest.total_params as f64).round() as usize).max(manifest.len()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_component_dims.contains(&0) {
            return Err(Error::ConfigMismatch("every component needs at least one row".into()));
        }
        if self.per_component_dims.iter().sum::<usize>() != self.total_dim {
            return Err(Error::ConfigMismatch("per-component dims do not sum to total_dim".into()));
        }
        Ok(())
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.per_component_dims
            .iter()
            .map(|d| {
                let o = acc;
                acc += d;
                o
            })
            .collect()
    }
}

/// Splits `total_dim` rows across components proportionally to their
/// parameter counts. Every component gets at least one row; leftover rows go
/// to the largest fractional remainders (ties: larger component, then
/// smaller id). If the one-row floors overshoot, rows are taken back from
/// the smallest remainders among components holding more than one.
pub fn allocate_dims(manifest: &ComponentManifest, total_dim: usize) -> Result<Vec<usize>> {
    let n = manifest.len();
    if total_dim < n {
        return Err(Error::DimTooSmall { dim: total_dim, components: n });
    }
    let m = manifest.total_params as u128;
    let d = total_dim as u128;
    let sizes = manifest.param_counts();
    let mut dims: Vec<usize> = sizes.iter().map(|&s| ((d * s as u128 / m) as usize).max(1)).collect();
    // remainder numerators: exact share minus allocation, scaled by M
    let rem = |k: usize, dims: &[usize]| d as i128 * sizes[k] as i128 - dims[k] as i128 * m as i128;
    let ids: Vec<_> = manifest.ids().collect();

    let mut assigned: usize = dims.iter().sum();
    while assigned < total_dim {
        let k = (0..n)
            .max_by(|&a, &b| rem(a, &dims).cmp(&rem(b, &dims)).then(sizes[a].cmp(&sizes[b])).then(ids[b].cmp(&ids[a])))
            .unwrap();
        dims[k] += 1;
        assigned += 1;
    }
    while assigned > total_dim {
        let k = (0..n)
            .filter(|&k| dims[k] > 1)
            .min_by(|&a, &b| rem(a, &dims).cmp(&rem(b, &dims)).then(sizes[a].cmp(&sizes[b])).then(ids[b].cmp(&ids[a])))
            .expect("total_dim >= component count leaves a reducible component");
        dims[k] -= 1;
        assigned -= 1;
    }
    Ok(dims)
}

fn row_rng(seed: u64, component: usize, row: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(component as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(row as u64);
    rng
}

fn unit_open(rng: &mut ChaCha8Rng) -> f64 {
    // (0, 1]
    1.0 - (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn fill_chunk(rng: &mut ChaCha8Rng, dist: Distribution, out: &mut [f64; CHUNK]) {
    match dist {
        Distribution::Rademacher => {
            let bits = rng.next_u64();
            for (i, v) in out.iter_mut().enumerate() {
                *v = if bits >> i & 1 == 1 { 1.0 } else { -1.0 };
            }
        }
        Distribution::Gaussian => {
            for pair in out.chunks_exact_mut(2) {
                let r = (-2.0 * unit_open(rng).ln()).sqrt();
                let theta = std::f64::consts::TAU * rng.random::<f64>();
                pair[0] = r * theta.cos();
                pair[1] = r * theta.sin();
            }
        }
    }
}

/// Single entry `R_k[row, col]`, computed independently of all others.
pub fn matrix_entry(seed: u64, dist: Distribution, component: usize, row: usize, col: usize) -> f64 {
    let mut rng = row_rng(seed, component, row);
    rng.set_word_pos((col / CHUNK) as u128 * dist.words_per_chunk());
    let mut chunk = [0.0; CHUNK];
    fill_chunk(&mut rng, dist, &mut chunk);
    chunk[col % CHUNK]
}

/// `(R_k v)[row]`, summed sequentially in f64.
fn project_row(seed: u64, dist: Distribution, component: usize, row: usize, block: &[f32]) -> f64 {
    let mut rng = row_rng(seed, component, row);
    let mut chunk = [0.0; CHUNK];
    let mut acc = 0.0f64;
    for (c, vals) in block.chunks(CHUNK).enumerate() {
        // sequential consumption lands on the same word positions as matrix_entry
        debug_assert_eq!(rng.get_word_pos(), c as u128 * dist.words_per_chunk());
        fill_chunk(&mut rng, dist, &mut chunk);
        for (r, &v) in chunk.iter().zip(vals) {
            acc += r * v as f64;
        }
    }
    acc
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedRecord {
    pub sample_id: u64,
    pub vector: Vec<f32>,
}

pub fn project_record(
    record: &GradientRecord,
    config: &ProjectionConfig,
    mode: Parallelism,
) -> Result<ProjectedRecord> {
    config.validate()?;
    if record.blocks.len() != config.per_component_dims.len() {
        return Err(Error::ManifestMismatch(format!(
            "sample {} has {} blocks, projection expects {}",
            record.sample_id,
            record.blocks.len(),
            config.per_component_dims.len()
        )));
    }
    let rows: Vec<(usize, usize)> =
        config.per_component_dims.iter().enumerate().flat_map(|(k, &d)| (0..d).map(move |r| (k, r))).collect();
    let vector = par::map_slice(mode, &rows, |&(k, r)| {
        let scale = 1.0 / (config.per_component_dims[k] as f64).sqrt();
        (scale * project_row(config.seed, config.distribution, k, r, &record.blocks[k])) as f32
    });
    Ok(ProjectedRecord { sample_id: record.sample_id, vector })
}

pub fn project_records(
    records: &[GradientRecord],
    config: &ProjectionConfig,
    mode: Parallelism,
) -> Result<Vec<ProjectedRecord>> {
    par::try_map_slice(mode, records, |r| project_record(r, config, Parallelism::Sequential))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ProjectedHeader {
    manifest: ComponentManifest,
    projection: ProjectionConfig,
}

/// Projected vectors of a whole sample set together with their config.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedSet {
    pub manifest: ComponentManifest,
    pub config: ProjectionConfig,
    pub records: Vec<ProjectedRecord>,
}

impl ProjectedSet {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = ProjectedHeader { manifest: self.manifest.clone(), projection: self.config.clone() };
        let mut w = RawWriter::create(path.as_ref(), PROJECTED_MAGIC, &header, self.config.per_component_dims.clone())?;
        let offsets = self.config.offsets();
        for r in &self.records {
            if r.vector.len() != self.config.total_dim {
                return Err(Error::ManifestMismatch(format!("projected sample {} has wrong length", r.sample_id)));
            }
            let blocks: Vec<&[f32]> =
                offsets.iter().zip(&self.config.per_component_dims).map(|(&o, &d)| &r.vector[o..o + d]).collect();
            w.write(r.sample_id, &blocks)?;
        }
        w.finish()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (mut raw, header) = RawReader::open(path.as_ref(), PROJECTED_MAGIC, |h: &ProjectedHeader| {
            h.projection.per_component_dims.clone()
        })?;
        header.projection.validate()?;
        let mut records = Vec::with_capacity(raw.len() as usize);
        raw.rewind()?;
        for _ in 0..raw.len() {
            let (sample_id, blocks) = raw.read_next()?;
            records.push(ProjectedRecord { sample_id, vector: blocks.concat() });
        }
        Ok(ProjectedSet { manifest: header.manifest, config: header.projection, records })
    }
}

/// Projects every record of a gradient file, decoding `batch` records at a
/// time.
pub fn project_file(
    input: impl AsRef<Path>,
    output: impl AsRef<Path>,
    config: &ProjectionConfig,
    batch: usize,
    mode: Parallelism,
) -> Result<()> {
    let mut reader = GradientReader::open(input)?;
    let manifest = reader.manifest().clone();
    if manifest.hash() != config.manifest_hash {
        return Err(Error::ConfigMismatch("projection config was built for a different manifest".into()));
    }
    let header = ProjectedHeader { manifest, projection: config.clone() };
    let mut w = RawWriter::create(output.as_ref(), PROJECTED_MAGIC, &header, config.per_component_dims.clone())?;
    let offsets = config.offsets();
    let mut records = reader.records()?;
    loop {
        let chunk: Vec<GradientRecord> = records.by_ref().take(batch.max(1)).collect::<Result<_>>()?;
        if chunk.is_empty() {
            break;
        }
        for p in project_records(&chunk, config, mode)? {
            let blocks: Vec<&[f32]> =
                offsets.iter().zip(&config.per_component_dims).map(|(&o, &d)| &p.vector[o..o + d]).collect();
            w.write(p.sample_id, &blocks)?;
        }
    }
    w.finish()
}

fn projected_cosine(a: &[f32], b: &[f32], epsilon: f64) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    cosine_from_parts(ab, aa, bb, epsilon)
}

/// Cosine scores between projected queries and candidates for every pair in
/// the candidate sets.
pub fn projected_score_table(
    queries: &ProjectedSet,
    candidates: &ProjectedSet,
    cand_sets: &[CandidateSet],
    params: SimilarityParams,
    mode: Parallelism,
) -> Result<ScoreTable> {
    if queries.config != candidates.config {
        return Err(Error::ConfigMismatch("queries and candidates were projected differently".into()));
    }
    let q: HashMap<u64, &ProjectedRecord> = queries.records.iter().map(|r| (r.sample_id, r)).collect();
    let c: HashMap<u64, &ProjectedRecord> = candidates.records.iter().map(|r| (r.sample_id, r)).collect();
    let rows = par::try_map_slice(mode, cand_sets, |cs| {
        let qv = q.get(&cs.query_id).ok_or(Error::MissingGradient(cs.query_id))?;
        cs.members
            .iter()
            .map(|&j| {
                let cv = c.get(&j).ok_or(Error::MissingGradient(j))?;
                Ok((PairKey::new(cs.query_id, j), projected_cosine(&qv.vector, &cv.vector, params.epsilon)))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(ScoreTable { scores: rows.into_iter().flatten().collect(), subset: None })
}
