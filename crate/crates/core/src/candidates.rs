//! Lexical pre-filtering: Okapi BM25 over an inverted index, and candidate
//! set construction with forced inclusion of the query's original.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Parallelism};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorpusRole {
    Base,
    Paraphrased,
    ModelGenerated,
}

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: u64,
    pub prompt: String,
    pub completion: String,
}

impl Document {
    pub fn text(&self) -> String {
        format!("{} {}", self.prompt, self.completion)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub role: CorpusRole,
    pub docs: Vec<Document>,
}

impl Corpus {
    pub fn new(role: CorpusRole, docs: Vec<Document>) -> Result<Self> {
        for (i, d) in docs.iter().enumerate() {
            if d.id != i as u64 {
                return Err(Error::Format(format!("corpus ids must be dense 0..N-1; line {i} has id {}", d.id)));
            }
        }
        Ok(Corpus { role, docs })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Reads a line-delimited JSON file of `{id, prompt, completion}` objects.
    /// Lines may appear in any order; ids must cover 0..N-1 exactly.
    pub fn load_jsonl(path: impl AsRef<Path>, role: CorpusRole) -> Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut docs = Vec::new();
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            docs.push(serde_json::from_str::<Document>(&line)?);
        }
        docs.sort_by_key(|d| d.id);
        Corpus::new(role, docs)
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for d in &self.docs {
            serde_json::to_writer(&mut w, d)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Lowercase, split on runs of non-alphanumeric characters. No stemming,
/// no stopwords.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(|t| t.to_lowercase()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if self.k1.is_nan() || self.k1 < 0.0 || !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Invalid(format!("BM25 parameters out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Inverted index over a base corpus.
#[derive(Debug)]
pub struct Bm25Index {
    postings: HashMap<String, Vec<(u32, u32)>>,
    doc_len: Vec<u32>,
    avg_len: f64,
    params: Bm25Params,
}

impl Bm25Index {
    pub fn new(corpus: &Corpus, params: Bm25Params) -> Result<Self> {
        params.validate()?;
        if corpus.is_empty() {
            return Err(Error::Invalid("BM25 over an empty corpus".into()));
        }
        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
        let mut doc_len = Vec::with_capacity(corpus.len());
        for (d, doc) in corpus.docs.iter().enumerate() {
            let toks = tokenize(&doc.text());
            doc_len.push(toks.len() as u32);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in toks {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push((d as u32, n));
            }
        }
        let avg_len = doc_len.iter().map(|&l| l as f64).sum::<f64>() / doc_len.len() as f64;
        Ok(Bm25Index { postings, doc_len, avg_len, params })
    }

    pub fn len(&self) -> usize {
        self.doc_len.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_len.is_empty()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.len() as f64;
        let df = self.postings.get(term).map_or(0, |p| p.len()) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// One score per document. Every query token occurrence contributes, so
    /// a repeated query term counts repeatedly.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let Bm25Params { k1, b } = self.params;
        let mut scores = vec![0.0; self.len()];
        for term in tokenize(query) {
            let Some(posting) = self.postings.get(&term) else { continue };
            let idf = self.idf(&term);
            for &(d, tf) in posting {
                let tf = tf as f64;
                let rel_len = if self.avg_len > 0.0 { self.doc_len[d as usize] as f64 / self.avg_len } else { 1.0 };
                scores[d as usize] += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * rel_len));
            }
        }
        scores
    }
}

/// BM25 scores of `query` against every document of `corpus`.
pub fn bm25_scores(query: &str, corpus: &Corpus, params: Bm25Params) -> Result<Vec<f64>> {
    Ok(Bm25Index::new(corpus, params)?.scores(query))
}

/// Top-`b` lexical candidates for one query, always containing the query's
/// original counterpart (base id == query id).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub query_id: u64,
    pub b: usize,
    /// Candidate ids in rank order; a forced original sits in the evicted slot.
    pub members: Vec<u64>,
    pub forced: bool,
}

impl CandidateSet {
    pub fn contains(&self, id: u64) -> bool {
        self.members.contains(&id)
    }

    /// Members other than the original.
    pub fn distractors(&self) -> impl Iterator<Item = u64> + '_ {
        self.members.iter().copied().filter(move |&j| j != self.query_id)
    }
}

/// Ids ranked by descending score, ties broken by ascending id.
pub fn rank(scores: &[f64]) -> Vec<u64> {
    let mut ids: Vec<u64> = (0..scores.len() as u64).collect();
    ids.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));
    ids
}

pub fn build_candidate_set(query_id: u64, query_text: &str, index: &Bm25Index, b: usize) -> Result<CandidateSet> {
    let n = index.len();
    if b == 0 {
        return Err(Error::Invalid("candidate set size must be positive".into()));
    }
    if b > n {
        return Err(Error::SetTooLarge { b, n });
    }
    if query_id as usize >= n {
        return Err(Error::Invalid(format!("query id {query_id} has no original in a corpus of {n}")));
    }
    let scores = index.scores(query_text);
    let mut members: Vec<u64> = rank(&scores).into_iter().take(b).collect();
    let forced = !members.contains(&query_id);
    if forced {
        // rank order puts the minimum score (highest id among ties) last
        *members.last_mut().unwrap() = query_id;
    }
    Ok(CandidateSet { query_id, b, members, forced })
}

/// Candidate sets for every query, evaluated in parallel. Query `i` pairs
/// with base sample `i`.
pub fn build_candidate_sets(
    queries: &Corpus,
    base: &Corpus,
    b: usize,
    params: Bm25Params,
    mode: Parallelism,
) -> Result<Vec<CandidateSet>> {
    if queries.len() != base.len() {
        return Err(Error::Invalid(format!("query corpus has {} samples, base has {}", queries.len(), base.len())));
    }
    let index = Bm25Index::new(base, params)?;
    par::try_map_slice(mode, &queries.docs, |q| build_candidate_set(q.id, &q.text(), &index, b))
}

pub fn save_candidate_sets(sets: &[CandidateSet], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(sets)?)?;
    Ok(())
}

pub fn load_candidate_sets(path: impl AsRef<Path>) -> Result<Vec<CandidateSet>> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(texts: &[&str]) -> Corpus {
        let docs = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document { id: i as u64, prompt: t.to_string(), completion: String::new() })
            .collect();
        Corpus::new(CorpusRole::Base, docs).unwrap()
    }

    #[test]
    fn tokenizer() {
        assert_eq!(tokenize("Hello, <user> World!! a1_b"), vec!["hello", "user", "world", "a1", "b"]);
        assert!(tokenize("  ,; ").is_empty());
    }

    #[test]
    fn hand_evaluated_okapi() {
        // frozen from a direct evaluation of the Okapi formula
        let c = corpus(&["a b", "a a b", "c"]);
        let s = bm25_scores("a", &c, Bm25Params::default()).unwrap();
        approx::assert_abs_diff_eq!(s[0], 0.47000362924573563, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(s[1], 0.5665797174469143, epsilon = 1e-12);
        assert_eq!(s[2], 0.0);
    }

    #[test]
    fn absent_term_contributes_nothing() {
        let c = corpus(&["a b", "a a b", "c"]);
        let with = bm25_scores("a zzz", &c, Bm25Params::default()).unwrap();
        let without = bm25_scores("a", &c, Bm25Params::default()).unwrap();
        assert_eq!(with, without);
        assert_eq!(bm25_scores("", &c, Bm25Params::default()).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn single_doc_positive() {
        let c = corpus(&["the quick fox"]);
        assert!(bm25_scores("the quick fox", &c, Bm25Params::default()).unwrap()[0] > 0.0);
    }

    #[test]
    fn self_retrieval_not_forced() {
        let c = corpus(&["alpha beta", "gamma delta", "eps zeta", "eta theta", "iota kappa", "lambda mu", "nu xi"]);
        let idx = Bm25Index::new(&c, Bm25Params::default()).unwrap();
        let cs = build_candidate_set(3, "eta theta", &idx, 5).unwrap();
        assert!(!cs.forced);
        assert_eq!(cs.members[0], 3);
        assert_eq!(cs.members.len(), 5);
    }

    #[test]
    fn unrelated_query_forces_original() {
        let c = corpus(&["alpha beta", "alpha gamma", "alpha delta", "alpha eps", "alpha zeta", "alpha eta", "omega"]);
        let idx = Bm25Index::new(&c, Bm25Params::default()).unwrap();
        let cs = build_candidate_set(6, "alpha", &idx, 5).unwrap();
        assert!(cs.forced);
        assert_eq!(cs.members.len(), 5);
        assert!(cs.contains(6));
        // all alpha docs tie; rank keeps 0..4 and the highest id (4) is evicted
        assert_eq!(cs.members, vec![0, 1, 2, 3, 6]);
    }

    #[test]
    fn full_size_set_and_oversize() {
        let c = corpus(&["a", "b", "c"]);
        let idx = Bm25Index::new(&c, Bm25Params::default()).unwrap();
        let mut all = build_candidate_set(1, "zzz", &idx, 3).unwrap().members;
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(matches!(build_candidate_set(1, "a", &idx, 4), Err(Error::SetTooLarge { b: 4, n: 3 })));
    }

    #[test]
    fn params_validated() {
        let c = corpus(&["a"]);
        assert!(Bm25Index::new(&c, Bm25Params { k1: -1.0, b: 0.5 }).is_err());
        assert!(Bm25Index::new(&c, Bm25Params { k1: 1.0, b: 1.5 }).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let c = corpus(&["x y", "z"]);
        c.save_jsonl(&p).unwrap();
        assert_eq!(Corpus::load_jsonl(&p, CorpusRole::Base).unwrap(), c);
    }
}
