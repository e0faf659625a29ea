//! Procedural toy corpus, synonym-based paraphrasing and model-generated
//! query construction.

use std::collections::HashMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Params, TokenSequence};
use crate::candidates::{Corpus, CorpusRole, Document};
use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const UNK: u32 = 1;
pub const USER: u32 = 2;
pub const ASSISTANT: u32 = 3;
const FIRST_WORD: u32 = 4;
const PROMPT_COMMON: usize = 6;

/// Word list of the toy vocabulary. Word ids split into a common half and a
/// rare half; every word has one synonym (its id with the low bit flipped)
/// from the same half.
#[derive(Clone, Debug)]
pub struct ToyVocab {
    size: u32,
    rare_start: u32,
    lookup: HashMap<String, u32>,
}

impl ToyVocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 16 {
            return Err(Error::Invalid(format!("toy vocabulary needs at least 16 tokens, got {size}")));
        }
        let size = size as u32;
        let words = size - FIRST_WORD;
        let rare_start = FIRST_WORD + (words / 2 + words / 2 % 2);
        let mut v = ToyVocab { size, rare_start, lookup: HashMap::new() };
        v.lookup = (0..size).map(|id| (v.word(id), id)).collect();
        Ok(v)
    }

    pub fn size(&self) -> usize {
        self.size as usize
    }

    pub fn word(&self, id: u32) -> String {
        match id {
            BOS => "<|bos|>".into(),
            UNK => "<|unk|>".into(),
            USER => "<|user|>".into(),
            ASSISTANT => "<|assistant|>".into(),
            id if id < self.rare_start => format!("w{id}"),
            id => format!("r{id}"),
        }
    }

    pub fn id(&self, word: &str) -> u32 {
        self.lookup.get(word).copied().unwrap_or(UNK)
    }

    fn common(&self) -> std::ops::Range<u32> {
        FIRST_WORD..self.rare_start
    }

    fn rare(&self) -> std::ops::Range<u32> {
        self.rare_start..self.size
    }

    /// Bijective synonym map; special tokens and an unpaired last word map to
    /// themselves.
    pub fn synonym(&self, id: u32) -> u32 {
        if id < FIRST_WORD {
            return id;
        }
        let s = id ^ 1;
        let same_half = (id < self.rare_start) == (s < self.rare_start);
        if s < self.size && same_half {
            s
        } else {
            id
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens.iter().map(|&t| self.word(t)).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySample {
    pub sample_id: u64,
    pub prompt_tokens: Vec<u32>,
    pub completion_tokens: Vec<u32>,
}

impl ToySample {
    pub fn sequence(&self) -> TokenSequence {
        TokenSequence::new(BOS, &self.prompt_tokens, &self.completion_tokens)
    }

    pub fn to_document(&self, vocab: &ToyVocab) -> Document {
        Document {
            id: self.sample_id,
            prompt: vocab.decode(&self.prompt_tokens),
            completion: vocab.decode(&self.completion_tokens),
        }
    }

    pub fn from_document(doc: &Document, vocab: &ToyVocab) -> Result<Self> {
        let s = ToySample {
            sample_id: doc.id,
            prompt_tokens: vocab.encode(&doc.prompt),
            completion_tokens: vocab.encode(&doc.completion),
        };
        if s.completion_tokens.is_empty() {
            return Err(Error::EmptyCompletion(doc.id));
        }
        Ok(s)
    }
}

fn sample_rng(seed: u64, stream: u64, sample_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(sample_id);
    rng
}

/// Template sample: a user turn of common words with two sample-specific rare
/// words mixed in, answered by echoing the rare words and a fixed mapping of
/// the leading common words. Each word is drawn as a meaning (a synonym pair)
/// and then written as either member of the pair, so synonyms are
/// interchangeable in the training data and a synonym swap keeps a sample's
/// meaning.
pub fn generate_sample(vocab: &ToyVocab, seed: u64, sample_id: u64) -> ToySample {
    let mut rng = sample_rng(seed, 1, sample_id);
    let common = vocab.common();
    let rare = vocab.rare();
    let c: Vec<u32> = (0..PROMPT_COMMON).map(|_| rng.random_range(common.clone())).collect();
    let r: Vec<u32> = (0..2).map(|_| rng.random_range(rare.clone())).collect();
    let n_common = common.len() as u32;
    // maps meanings, i.e. the even member of each pair, onto meanings
    let map = |w: u32| FIRST_WORD + ((((w - FIRST_WORD) / 2) * 5 + 17) % (n_common / 2)) * 2;
    let mut write = |w: u32| if rng.random_bool(0.5) { vocab.synonym(w) } else { w };
    let canon = |w: u32| w & !1;
    let prompt = vec![USER, c[0], c[1], r[0], c[2], c[3], r[1], c[4], c[5]];
    let completion = vec![
        ASSISTANT,
        write(canon(r[0])),
        write(map(canon(c[0]))),
        write(map(canon(c[1]))),
        write(canon(r[1])),
        write(map(canon(c[2]))),
    ];
    ToySample { sample_id, prompt_tokens: prompt, completion_tokens: completion }
}

pub fn generate_corpus(vocab: &ToyVocab, seed: u64, n: usize) -> Vec<ToySample> {
    (0..n as u64).map(|i| generate_sample(vocab, seed, i)).collect()
}

pub fn to_corpus(samples: &[ToySample], vocab: &ToyVocab, role: CorpusRole) -> Result<Corpus> {
    Corpus::new(role, samples.iter().map(|s| s.to_document(vocab)).collect())
}

pub fn from_corpus(corpus: &Corpus, vocab: &ToyVocab) -> Result<Vec<ToySample>> {
    corpus.docs.iter().map(|d| ToySample::from_document(d, vocab)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerturbMode {
    Paraphrased,
    ModelGenerated,
}

/// Swaps `round(fraction * eligible)` seeded positions for their synonyms.
/// Special tokens are never eligible.
fn swap_synonyms(tokens: &mut [u32], vocab: &ToyVocab, fraction: f64, rng: &mut ChaCha8Rng) {
    let eligible: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] >= FIRST_WORD).collect();
    let count = ((fraction * eligible.len() as f64).round() as usize).min(eligible.len());
    if count == 0 {
        return;
    }
    for pick in index::sample(rng, eligible.len(), count) {
        let i = eligible[pick];
        tokens[i] = vocab.synonym(tokens[i]);
    }
}

/// Builds one query sample from a base sample. `Paraphrased` swaps synonyms
/// in prompt and completion; `ModelGenerated` swaps in the prompt only and
/// greedily decodes a fresh completion of the original length from `params`.
pub fn perturb_sample(
    sample: &ToySample,
    mode: PerturbMode,
    params: &Params,
    vocab: &ToyVocab,
    fraction: f64,
    seed: u64,
) -> ToySample {
    let mut rng = sample_rng(seed, 2, sample.sample_id);
    let mut prompt = sample.prompt_tokens.clone();
    match mode {
        PerturbMode::Paraphrased => {
            // one draw over the concatenation so the fraction holds jointly
            let mut all = prompt.clone();
            all.extend_from_slice(&sample.completion_tokens);
            swap_synonyms(&mut all, vocab, fraction, &mut rng);
            let completion = all.split_off(prompt.len());
            ToySample { sample_id: sample.sample_id, prompt_tokens: all, completion_tokens: completion }
        }
        PerturbMode::ModelGenerated => {
            swap_synonyms(&mut prompt, vocab, fraction, &mut rng);
            let mut prefix = vec![BOS];
            prefix.extend_from_slice(&prompt);
            let completion = params.greedy_decode(&prefix, sample.completion_tokens.len());
            ToySample { sample_id: sample.sample_id, prompt_tokens: prompt, completion_tokens: completion }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toybench::model::MicroModelConfig;

    #[test]
    fn synonym_is_an_involution_within_halves() {
        let v = ToyVocab::new(256).unwrap();
        for id in 0..256 {
            let s = v.synonym(id);
            assert_eq!(v.synonym(s), id);
            if id >= FIRST_WORD {
                assert_ne!(s, id);
                assert_eq!(id < v.rare_start, s < v.rare_start);
            }
        }
        let odd = ToyVocab::new(17).unwrap();
        assert_eq!(odd.synonym(16), 16);
    }

    #[test]
    fn words_round_trip() {
        let v = ToyVocab::new(256).unwrap();
        let s = generate_sample(&v, 3, 11);
        let doc = s.to_document(&v);
        assert!(doc.prompt.starts_with("<|user|>"));
        assert_eq!(ToySample::from_document(&doc, &v).unwrap(), s);
        assert_eq!(v.encode("nonsense"), vec![UNK]);
    }

    #[test]
    fn completions_depend_on_meanings_only() {
        let v = ToyVocab::new(256).unwrap();
        for id in 0..50 {
            let s = generate_sample(&v, 2, id);
            let c = &s.completion_tokens;
            let p = &s.prompt_tokens;
            assert_eq!(c[1] & !1, p[3] & !1);
            assert_eq!(c[4] & !1, p[6] & !1);
            for t in &c[1..] {
                assert!(*t >= FIRST_WORD && *t < 256);
            }
            // synonymous prompts share the meaning of every mapped word
            let mapped = |w: u32| FIRST_WORD + ((((w & !1) - FIRST_WORD) / 2 * 5 + 17) % 63) * 2;
            assert_eq!(c[2] & !1, mapped(p[1]));
            assert_eq!(c[3] & !1, mapped(p[2]));
            assert_eq!(c[5] & !1, mapped(p[4]));
        }
    }

    #[test]
    fn zero_fraction_is_identity_and_lengths_hold() {
        let v = ToyVocab::new(256).unwrap();
        let cfg = MicroModelConfig { d_model: 8, n_heads: 2, d_ff: 8, layers: 1, ..Default::default() };
        let params = Params::init(&cfg).unwrap();
        let s = generate_sample(&v, 1, 0);
        assert_eq!(perturb_sample(&s, PerturbMode::Paraphrased, &params, &v, 0.0, 9), s);
        let p = perturb_sample(&s, PerturbMode::Paraphrased, &params, &v, 0.2, 9);
        assert_eq!(p.prompt_tokens.len(), s.prompt_tokens.len());
        assert_eq!(p.completion_tokens.len(), s.completion_tokens.len());
        let changed = p
            .prompt_tokens
            .iter()
            .chain(&p.completion_tokens)
            .zip(s.prompt_tokens.iter().chain(&s.completion_tokens))
            .filter(|(a, b)| a != b)
            .count();
        // 13 eligible words, 20% -> 3 swaps
        assert_eq!(changed, 3);
    }

    #[test]
    fn model_generated_completion_is_greedy() {
        let v = ToyVocab::new(256).unwrap();
        let cfg = MicroModelConfig { d_model: 8, n_heads: 2, d_ff: 8, layers: 1, seed: 4, ..Default::default() };
        let params = Params::init(&cfg).unwrap();
        let s = generate_sample(&v, 1, 5);
        let m = perturb_sample(&s, PerturbMode::ModelGenerated, &params, &v, 0.2, 9);
        assert_eq!(m.completion_tokens.len(), s.completion_tokens.len());
        let mut prefix = vec![BOS];
        prefix.extend_from_slice(&m.prompt_tokens);
        assert_eq!(params.greedy_decode(&prefix, m.completion_tokens.len()), m.completion_tokens);
    }
}
