//! Component-wise dot products between query and candidate gradients.
//!
//! The cache stores, for every (query, candidate) pair, one 64-bit dot
//! product per manifest component, plus per-component squared norms for
//! every query and candidate involved. Any subset cosine can be rebuilt from
//! these scalars alone.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::candidates::CandidateSet;
use crate::error::{Error, Result};
use crate::manifest::{ComponentManifest, GradientRecord};
use crate::par::{self, Parallelism};
use crate::store::GradientReader;

pub const CACHE_MAGIC: [u8; 4] = *b"GSD1";
const CACHE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairKey {
    pub query_id: u64,
    pub cand_id: u64,
}

impl PairKey {
    pub fn new(query_id: u64, cand_id: u64) -> Self {
        PairKey { query_id, cand_id }
    }
}

/// Dot product of two equal-length blocks, summed sequentially in f64.
pub fn block_dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += x as f64 * y as f64;
    }
    acc
}

fn check_compatible(a: &GradientRecord, b: &GradientRecord) -> Result<()> {
    if a.blocks.len() != b.blocks.len() || a.blocks.iter().zip(&b.blocks).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::ManifestMismatch(format!(
            "samples {} and {} have different block layouts",
            a.sample_id, b.sample_id
        )));
    }
    Ok(())
}

/// Per-component dot products of two records.
pub fn compute_pair_dots(query: &GradientRecord, cand: &GradientRecord) -> Result<Vec<f64>> {
    check_compatible(query, cand)?;
    Ok(query.blocks.iter().zip(&cand.blocks).map(|(a, b)| block_dot(a, b)).collect())
}

pub fn self_dots(record: &GradientRecord) -> Vec<f64> {
    record.blocks.iter().map(|b| block_dot(b, b)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DotCache {
    pub manifest_hash: String,
    pub n_components: usize,
    pub entries: BTreeMap<PairKey, Vec<f64>>,
    pub query_self: BTreeMap<u64, Vec<f64>>,
    pub cand_self: BTreeMap<u64, Vec<f64>>,
}

impl DotCache {
    pub fn empty(manifest: &ComponentManifest) -> Self {
        DotCache {
            manifest_hash: manifest.hash(),
            n_components: manifest.len(),
            entries: BTreeMap::new(),
            query_self: BTreeMap::new(),
            cand_self: BTreeMap::new(),
        }
    }

    /// Assembles a cache from precomputed parts and checks its invariants.
    pub fn from_parts(
        manifest_hash: String,
        n_components: usize,
        entries: BTreeMap<PairKey, Vec<f64>>,
        query_self: BTreeMap<u64, Vec<f64>>,
        cand_self: BTreeMap<u64, Vec<f64>>,
    ) -> Result<Self> {
        let cache = DotCache { manifest_hash, n_components, entries, query_self, cand_self };
        cache.validate()?;
        Ok(cache)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_components;
        let bad_len = |what: &str, n: usize| Error::Format(format!("{what} row has {n} entries, expected {k}"));
        for (key, row) in &self.entries {
            if row.len() != k {
                return Err(bad_len("pair", row.len()));
            }
            if !self.query_self.contains_key(&key.query_id) || !self.cand_self.contains_key(&key.cand_id) {
                return Err(Error::Format(format!("pair ({}, {}) lacks self products", key.query_id, key.cand_id)));
            }
        }
        for row in self.query_self.values().chain(self.cand_self.values()) {
            if row.len() != k {
                return Err(bad_len("self", row.len()));
            }
            if row.iter().any(|&v| v.is_nan() || v < 0.0) {
                return Err(Error::Format("negative or NaN self product".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pair(&self, query_id: u64, cand_id: u64) -> Result<&[f64]> {
        self.entries
            .get(&PairKey::new(query_id, cand_id))
            .map(Vec::as_slice)
            .ok_or(Error::MissingPair { query_id, cand_id })
    }

    pub fn query_norms(&self, query_id: u64) -> Result<&[f64]> {
        self.query_self.get(&query_id).map(Vec::as_slice).ok_or(Error::MissingGradient(query_id))
    }

    pub fn cand_norms(&self, cand_id: u64) -> Result<&[f64]> {
        self.cand_self.get(&cand_id).map(Vec::as_slice).ok_or(Error::MissingGradient(cand_id))
    }

    pub fn check_manifest(&self, manifest: &ComponentManifest) -> Result<()> {
        let h = manifest.hash();
        if h != self.manifest_hash {
            return Err(Error::HashMismatch { cache: self.manifest_hash.clone(), manifest: h });
        }
        Ok(())
    }

    /// Candidate sets implied by the cached pair keys, one per query, members
    /// in ascending id order.
    pub fn candidate_sets(&self) -> Vec<CandidateSet> {
        let mut by_query: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for key in self.entries.keys() {
            by_query.entry(key.query_id).or_default().push(key.cand_id);
        }
        by_query
            .into_iter()
            .map(|(query_id, members)| CandidateSet { query_id, b: members.len(), forced: false, members })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(&CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        let hash = self.manifest_hash.as_bytes();
        w.write_all(&(hash.len() as u32).to_le_bytes())?;
        w.write_all(hash)?;
        w.write_all(&(self.n_components as u32).to_le_bytes())?;
        for n in [self.entries.len(), self.query_self.len(), self.cand_self.len()] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        for key in self.entries.keys() {
            w.write_all(&key.query_id.to_le_bytes())?;
            w.write_all(&key.cand_id.to_le_bytes())?;
        }
        for id in self.query_self.keys().chain(self.cand_self.keys()) {
            w.write_all(&id.to_le_bytes())?;
        }
        for row in self.entries.values().chain(self.query_self.values()).chain(self.cand_self.values()) {
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a cache and verifies it was built for `manifest`.
    pub fn load(path: impl AsRef<Path>, manifest: &ComponentManifest) -> Result<Self> {
        let cache = Self::load_unchecked(path)?;
        cache.check_manifest(manifest)?;
        if cache.n_components != manifest.len() {
            return Err(Error::Format("component count disagrees with manifest".into()));
        }
        Ok(cache)
    }

    pub fn load_unchecked(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if magic != CACHE_MAGIC {
            return Err(Error::BadMagic { expected: CACHE_MAGIC, found: magic });
        }
        let version = read_u32(&mut r)?;
        if version != CACHE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let hash_len = read_u32(&mut r)? as usize;
        if hash_len > 1024 {
            return Err(Error::Format("implausible manifest hash length".into()));
        }
        let mut hash = vec![0u8; hash_len];
        read_exact(&mut r, &mut hash)?;
        let manifest_hash = String::from_utf8(hash).map_err(|_| Error::Format("manifest hash is not UTF-8".into()))?;
        let k = read_u32(&mut r)? as usize;
        let n_pairs = read_u64(&mut r)? as usize;
        let n_q = read_u64(&mut r)? as usize;
        let n_c = read_u64(&mut r)? as usize;

        let mut keys = Vec::with_capacity(n_pairs);
        for _ in 0..n_pairs {
            keys.push(PairKey::new(read_u64(&mut r)?, read_u64(&mut r)?));
        }
        let mut ids = Vec::with_capacity(n_q + n_c);
        for _ in 0..n_q + n_c {
            ids.push(read_u64(&mut r)?);
        }
        let row = |r: &mut BufReader<std::fs::File>| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; 8 * k];
            read_exact(r, &mut buf)?;
            Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let mut entries = BTreeMap::new();
        for key in keys {
            entries.insert(key, row(&mut r)?);
        }
        let mut query_self = BTreeMap::new();
        for &id in &ids[..n_q] {
            query_self.insert(id, row(&mut r)?);
        }
        let mut cand_self = BTreeMap::new();
        for &id in &ids[n_q..] {
            cand_self.insert(id, row(&mut r)?);
        }
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(Error::Format("trailing bytes after cache payload".into()));
        }
        DotCache::from_parts(manifest_hash, k, entries, query_self, cand_self)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated("dot cache ended early".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[derive(Clone, Copy, Debug)]
pub struct BuildOptions {
    pub parallelism: Parallelism,
    /// Number of query records held in memory at once. The candidate file is
    /// streamed once per chunk.
    pub query_chunk: usize,
    /// Candidate records decoded per parallel batch.
    pub cand_batch: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { parallelism: Parallelism::Parallel, query_chunk: 1024, cand_batch: 64 }
    }
}

/// Builds the cache for exactly the pairs `{(i, j) : j in C_i}` plus all
/// self products, reading gradients from files.
pub fn build_cache(
    queries: impl AsRef<Path>,
    candidates: impl AsRef<Path>,
    cand_sets: &[CandidateSet],
    opts: BuildOptions,
) -> Result<DotCache> {
    let mut qr = GradientReader::open(queries)?;
    let mut cr = GradientReader::open(candidates)?;
    if qr.manifest().hash() != cr.manifest().hash() {
        return Err(Error::ManifestMismatch("query and candidate files use different manifests".into()));
    }
    let manifest = qr.manifest().clone();
    let k = manifest.len();
    let q_index = qr.sample_index()?;
    let c_index = cr.sample_index()?;
    let mode = opts.parallelism;

    let mut cache = DotCache::empty(&manifest);
    for chunk in cand_sets.chunks(opts.query_chunk.max(1)) {
        let mut query_recs = Vec::with_capacity(chunk.len());
        for cs in chunk {
            let pos = *q_index.get(&cs.query_id).ok_or(Error::MissingGradient(cs.query_id))?;
            query_recs.push(qr.read_at(pos)?);
        }
        let q_self = par::map_slice(mode, &query_recs, self_dots);
        for (rec, row) in query_recs.iter().zip(q_self) {
            cache.query_self.insert(rec.sample_id, row);
        }

        // candidate position -> queries in this chunk that need it
        let mut needed: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (qi, cs) in chunk.iter().enumerate() {
            for &j in &cs.members {
                let pos = *c_index.get(&j).ok_or(Error::MissingGradient(j))?;
                needed.entry(pos).or_default().push(qi);
            }
        }
        let positions: Vec<usize> = needed.keys().copied().collect();
        // positions are ascending, so the candidate file is read front to back
        for batch in positions.chunks(opts.cand_batch.max(1)) {
            let cands: Vec<GradientRecord> = batch.iter().map(|&p| cr.read_at(p)).collect::<Result<_>>()?;
            let work: Vec<(usize, usize)> =
                batch.iter().enumerate().flat_map(|(ci, p)| needed[p].iter().map(move |&qi| (qi, ci))).collect();
            // one work item per (pair, component); sums within a block stay sequential
            let dots = par::map_range(mode, work.len() * k, |w| {
                let (qi, ci) = work[w / k];
                let c = w % k;
                block_dot(&query_recs[qi].blocks[c], &cands[ci].blocks[c])
            });
            for (w, &(qi, ci)) in work.iter().enumerate() {
                let key = PairKey::new(query_recs[qi].sample_id, cands[ci].sample_id);
                cache.entries.insert(key, dots[w * k..(w + 1) * k].to_vec());
            }
            let missing: Vec<&GradientRecord> =
                cands.iter().filter(|c| !cache.cand_self.contains_key(&c.sample_id)).collect();
            let c_self = par::map_slice(mode, &missing, |c| self_dots(c));
            for (c, row) in missing.iter().zip(c_self) {
                cache.cand_self.insert(c.sample_id, row);
            }
        }
    }
    Ok(cache)
}

/// In-memory variant of [`build_cache`] used by tests and synthetic runs.
pub fn build_cache_in_memory(
    manifest: &ComponentManifest,
    queries: &[GradientRecord],
    candidates: &[GradientRecord],
    cand_sets: &[CandidateSet],
    mode: Parallelism,
) -> Result<DotCache> {
    let qmap: HashMap<u64, &GradientRecord> = queries.iter().map(|r| (r.sample_id, r)).collect();
    let cmap: HashMap<u64, &GradientRecord> = candidates.iter().map(|r| (r.sample_id, r)).collect();
    let mut pairs = Vec::new();
    let mut cand_ids = BTreeSet::new();
    for cs in cand_sets {
        let q = *qmap.get(&cs.query_id).ok_or(Error::MissingGradient(cs.query_id))?;
        q.check(manifest)?;
        for &j in &cs.members {
            let c = *cmap.get(&j).ok_or(Error::MissingGradient(j))?;
            pairs.push((q, c));
            cand_ids.insert(j);
        }
    }
    let rows = par::try_map_slice(mode, &pairs, |(q, c)| compute_pair_dots(q, c))?;
    let mut cache = DotCache::empty(manifest);
    for ((q, c), row) in pairs.iter().zip(rows) {
        cache.entries.insert(PairKey::new(q.sample_id, c.sample_id), row);
    }
    for cs in cand_sets {
        cache.query_self.insert(cs.query_id, self_dots(qmap[&cs.query_id]));
    }
    for j in cand_ids {
        cache.cand_self.insert(j, self_dots(cmap[&j]));
    }
    Ok(cache)
}
