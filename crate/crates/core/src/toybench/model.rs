//! Micro decoder-only transformer with a hand-written backward pass.
//!
//! Pre-norm blocks with parameter-free RMS normalization, causal multi-head
//! attention, a SiLU-gated MLP and an output head tied to the embedding.
//! The only trainable tensors are the component matrices of the manifest:
//! one embedding plus seven matrices per layer. Everything runs in f64.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{ComponentId, ComponentKind, ComponentManifest, GradientRecord};

const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl Default for MicroModelConfig {
    fn default() -> Self {
        MicroModelConfig { layers: 2, d_model: 32, n_heads: 2, d_ff: 64, vocab: 256, seed: 0 }
    }
}

impl MicroModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.vocab == 0 {
            return Err(Error::Invalid("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Invalid(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        Ok(())
    }

    pub fn manifest(&self) -> Result<ComponentManifest> {
        self.validate()?;
        let (d, f) = (self.d_model, self.d_ff);
        let mut comps = vec![(ComponentId::embedding(), vec![self.vocab, d])];
        for l in 0..self.layers as u32 {
            for kind in ComponentKind::LAYER_KINDS {
                let shape = match kind {
                    ComponentKind::MlpGate | ComponentKind::MlpUp => vec![f, d],
                    ComponentKind::MlpDown => vec![d, f],
                    _ => vec![d, d],
                };
                comps.push((ComponentId::layer(l, kind), shape));
            }
        }
        let mut m = ComponentManifest::new(format!("micro-transformer-{}x{}", self.layers, self.d_model), comps)?;
        m.metadata.insert("loss_normalization".into(), "mean_over_completion_tokens".into());
        m.metadata.insert("weight_layout".into(), "out_by_in".into());
        Ok(m)
    }
}

/// One layer's matrices, each stored as `[out, in]` so that `y = W x`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub gate: Array2<f64>,
    pub up: Array2<f64>,
    pub down: Array2<f64>,
}

impl LayerParams {
    fn zeros(d: usize, f: usize) -> Self {
        LayerParams {
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            gate: Array2::zeros((f, d)),
            up: Array2::zeros((f, d)),
            down: Array2::zeros((d, f)),
        }
    }

    fn mats(&self) -> [&Array2<f64>; 7] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.gate, &self.up, &self.down]
    }

    fn mats_mut(&mut self) -> [&mut Array2<f64>; 7] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo, &mut self.gate, &mut self.up, &mut self.down]
    }
}

/// Model parameters (or gradients, which share the layout).
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub config: MicroModelConfig,
    pub embedding: Array2<f64>,
    pub layers: Vec<LayerParams>,
}

impl Params {
    pub fn zeros(config: &MicroModelConfig) -> Self {
        Params {
            config: config.clone(),
            embedding: Array2::zeros((config.vocab, config.d_model)),
            layers: (0..config.layers).map(|_| LayerParams::zeros(config.d_model, config.d_ff)).collect(),
        }
    }

    /// Seeded uniform initialization with variance `1 / fan_in`.
    pub fn init(config: &MicroModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = Params::zeros(config);
        for m in p.matrices_mut() {
            let a = (3.0 / m.ncols() as f64).sqrt();
            m.mapv_inplace(|_| rng.random_range(-a..a));
        }
        Ok(p)
    }

    /// Matrices in manifest order.
    pub fn matrices(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![&self.embedding];
        for l in &self.layers {
            v.extend(l.mats());
        }
        v
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = vec![&mut self.embedding];
        for l in &mut self.layers {
            v.extend(l.mats_mut());
        }
        v
    }

    /// Row-major f32 blocks in manifest order.
    pub fn to_blocks(&self) -> Vec<Vec<f32>> {
        self.matrices().into_iter().map(|m| m.iter().map(|&v| v as f32).collect()).collect()
    }

    /// SHA-256 over the exact f64 bits of every matrix, hex encoded. Lets a
    /// later stage confirm it rebuilt the same weights.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for m in self.matrices() {
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn add_scaled(&mut self, other: &Params, c: f64) {
        for (a, b) in self.matrices_mut().into_iter().zip(other.matrices()) {
            a.scaled_add(c, b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for m in self.matrices_mut() {
            m.mapv_inplace(|v| v * c);
        }
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Fixed sinusoidal position code, added to token embeddings.
fn positions(t: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, d), |(p, i)| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let a = p as f64 * freq;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

/// Row-wise `x / sqrt(mean(x^2) + eps)`; returns the normalized rows and the
/// per-row scales.
fn rms_norm(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let r = x.map_axis(Axis(1), |row| (row.dot(&row) / d + NORM_EPS).sqrt());
    let mut y = x.clone();
    for (mut row, &ri) in y.rows_mut().into_iter().zip(&r) {
        row /= ri;
    }
    (y, r)
}

/// Backward of [`rms_norm`]: `dx = (dy - y * mean(dy * y)) / r`.
fn rms_norm_backward(y: &Array2<f64>, r: &Array1<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let d = y.ncols() as f64;
    let mut dx = dy.clone();
    for ((mut row, yrow), &ri) in dx.rows_mut().into_iter().zip(y.rows()).zip(r) {
        let m = row.dot(&yrow) / d;
        row.zip_mut_with(&yrow, |g, &yv| *g = (*g - yv * m) / ri);
    }
    dx
}

fn softmax_rows_causal(s: &mut Array2<f64>) {
    for (i, mut row) in s.rows_mut().into_iter().enumerate() {
        let max = row.iter().take(i + 1).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            *v = if j <= i { (*v - max).exp() } else { 0.0 };
            sum += *v;
        }
        row /= sum;
    }
}

struct LayerCache {
    a: Array2<f64>,
    ra: Array1<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    b: Array2<f64>,
    rb: Array1<f64>,
    g: Array2<f64>,
    u: Array2<f64>,
    z: Array2<f64>,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    f: Array2<f64>,
    rf: Array1<f64>,
    logits: Array2<f64>,
}

fn linear(x: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    x.dot(&w.t())
}

impl Params {
    fn forward(&self, tokens: &[u32]) -> ForwardCache {
        let cfg = &self.config;
        let t = tokens.len();
        let (d, nh) = (cfg.d_model, cfg.n_heads);
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = positions(t, d);
        for (p, &tok) in tokens.iter().enumerate() {
            x.row_mut(p).scaled_add(1.0, &self.embedding.row(tok as usize));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        for lp in &self.layers {
            let (a, ra) = rms_norm(&x);
            let q = linear(&a, &lp.wq);
            let k = linear(&a, &lp.wk);
            let v = linear(&a, &lp.wv);
            let mut o = Array2::zeros((t, d));
            let mut probs = Vec::with_capacity(nh);
            for h in 0..nh {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                softmax_rows_causal(&mut sc);
                o.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
                probs.push(sc);
            }
            let hres = &x + &linear(&o, &lp.wo);
            let (b, rb) = rms_norm(&hres);
            let g = linear(&b, &lp.gate);
            let u = linear(&b, &lp.up);
            let z = g.mapv(silu) * &u;
            let next = &hres + &linear(&z, &lp.down);
            caches.push(LayerCache { a, ra, q, k, v, probs, o, b, rb, g, u, z });
            x = next;
        }
        let (f, rf) = rms_norm(&x);
        let logits = f.dot(&self.embedding.t());
        ForwardCache { layers: caches, f, rf, logits }
    }

    /// Next-token logits after the last position.
    pub fn next_logits(&self, tokens: &[u32]) -> Vec<f64> {
        let fc = self.forward(tokens);
        fc.logits.row(tokens.len() - 1).to_vec()
    }

    /// Mean cross-entropy over completion tokens of `[bos] + prompt +
    /// completion`; only positions that predict a completion token count.
    pub fn loss(&self, seq: &TokenSequence) -> Result<f64> {
        seq.check(self.config.vocab)?;
        let fc = self.forward(&seq.tokens);
        Ok(cross_entropy(&fc.logits, seq).0)
    }

    pub fn loss_and_grad(&self, seq: &TokenSequence) -> Result<(f64, Params)> {
        seq.check(self.config.vocab)?;
        let fc = self.forward(&seq.tokens);
        let (loss, dlogits) = cross_entropy(&fc.logits, seq);
        let (mut grads, lookup) = self.backward(&seq.tokens, &fc, &dlogits);
        grads.embedding += &lookup;
        Ok((loss, grads))
    }

    /// The part of the embedding gradient that flows through the input token
    /// lookup, excluding the tied output head. Only rows of tokens present in
    /// the sequence can be nonzero.
    pub fn lookup_gradient(&self, seq: &TokenSequence) -> Result<Array2<f64>> {
        seq.check(self.config.vocab)?;
        let fc = self.forward(&seq.tokens);
        let (_, dlogits) = cross_entropy(&fc.logits, seq);
        Ok(self.backward(&seq.tokens, &fc, &dlogits).1)
    }

    /// Returns all gradients with the embedding holding only the head
    /// contribution, plus the lookup contribution separately.
    fn backward(&self, tokens: &[u32], fc: &ForwardCache, dlogits: &Array2<f64>) -> (Params, Array2<f64>) {
        let cfg = &self.config;
        let (d, nh) = (cfg.d_model, cfg.n_heads);
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut grads = Params::zeros(cfg);

        // tied head
        grads.embedding += &dlogits.t().dot(&fc.f);
        let df = dlogits.dot(&self.embedding);
        let mut dx = rms_norm_backward(&fc.f, &fc.rf, &df);

        for (li, (lp, c)) in self.layers.iter().zip(&fc.layers).enumerate().rev() {
            let gl = &mut grads.layers[li];
            // mlp
            gl.down = dx.t().dot(&c.z);
            let dz = dx.dot(&lp.down);
            let mut dg = &dz * &c.u;
            dg.zip_mut_with(&c.g, |v, &g| *v *= silu_grad(g));
            let du = &dz * &c.g.mapv(silu);
            gl.gate = dg.t().dot(&c.b);
            gl.up = du.t().dot(&c.b);
            let db = dg.dot(&lp.gate) + du.dot(&lp.up);
            let dh_res = &dx + &rms_norm_backward(&c.b, &c.rb, &db);

            // attention
            gl.wo = dh_res.t().dot(&c.o);
            let d_o = dh_res.dot(&lp.wo);
            let t = tokens.len();
            let mut dq = Array2::zeros((t, d));
            let mut dk = Array2::zeros((t, d));
            let mut dv = Array2::zeros((t, d));
            for h in 0..nh {
                let cols = s![.., h * dh..(h + 1) * dh];
                let p = &c.probs[h];
                let doh = d_o.slice(cols);
                let dp = doh.dot(&c.v.slice(cols).t());
                dv.slice_mut(cols).assign(&p.t().dot(&doh));
                let mut ds = dp;
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let inner = drow.dot(&prow);
                    drow.zip_mut_with(&prow, |g, &pv| *g = pv * (*g - inner));
                }
                ds *= scale;
                dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
            }
            gl.wq = dq.t().dot(&c.a);
            gl.wk = dk.t().dot(&c.a);
            gl.wv = dv.t().dot(&c.a);
            let da = dq.dot(&lp.wq) + dk.dot(&lp.wk) + dv.dot(&lp.wv);
            dx = dh_res + rms_norm_backward(&c.a, &c.ra, &da);
        }
        let mut lookup = Array2::zeros(self.embedding.raw_dim());
        for (p, &tok) in tokens.iter().enumerate() {
            lookup.row_mut(tok as usize).scaled_add(1.0, &dx.row(p));
        }
        (grads, lookup)
    }

    /// Per-sample gradient as a record of f32 blocks in manifest order.
    pub fn sample_gradient(&self, sample_id: u64, seq: &TokenSequence) -> Result<GradientRecord> {
        let (_, g) = self.loss_and_grad(seq)?;
        Ok(GradientRecord::new(sample_id, g.to_blocks()))
    }

    /// Greedy decoding of `len` tokens after `prefix` (ties: lowest id).
    pub fn greedy_decode(&self, prefix: &[u32], len: usize) -> Vec<u32> {
        let mut seq = prefix.to_vec();
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let logits = self.next_logits(&seq);
            let best = logits
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0 as u32;
            out.push(best);
            seq.push(best);
        }
        out
    }
}

/// `[bos] + prompt + completion` with the index where the completion starts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub completion_start: usize,
}

impl TokenSequence {
    pub fn new(bos: u32, prompt: &[u32], completion: &[u32]) -> Self {
        let mut tokens = Vec::with_capacity(1 + prompt.len() + completion.len());
        tokens.push(bos);
        tokens.extend_from_slice(prompt);
        let completion_start = tokens.len();
        tokens.extend_from_slice(completion);
        TokenSequence { tokens, completion_start }
    }

    pub fn completion_len(&self) -> usize {
        self.tokens.len() - self.completion_start
    }

    fn check(&self, vocab: usize) -> Result<()> {
        if self.completion_len() == 0 {
            return Err(Error::Invalid("sequence has an empty completion".into()));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::TokenOutOfRange { token: t, vocab });
        }
        Ok(())
    }
}

/// Mean cross-entropy over completion targets and its logit gradient.
fn cross_entropy(logits: &Array2<f64>, seq: &TokenSequence) -> (f64, Array2<f64>) {
    let n = seq.completion_len() as f64;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for target_pos in seq.completion_start..seq.tokens.len() {
        let p = target_pos - 1;
        let row: ArrayView2<f64> = logits.slice(s![p..p + 1, ..]);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let target = seq.tokens[target_pos] as usize;
        loss += -(row[[0, target]] - max - sum.ln());
        let mut drow = dlogits.row_mut(p);
        for (j, g) in drow.iter_mut().enumerate() {
            *g = (row[[0, j]] - max).exp() / sum / n;
        }
        drow[target] -= 1.0 / n;
    }
    (loss / n, dlogits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MicroModelConfig {
        MicroModelConfig { layers: 2, d_model: 8, n_heads: 2, d_ff: 12, vocab: 20, seed: 5 }
    }

    #[test]
    fn manifest_matches_taxonomy() {
        let m = MicroModelConfig::default().manifest().unwrap();
        assert_eq!(m.len(), 15);
        assert_eq!(m.total_params, 256 * 32 + 2 * (4 * 32 * 32 + 3 * 64 * 32));
        let p = Params::init(&MicroModelConfig::default()).unwrap();
        for (mat, entry) in p.matrices().iter().zip(&m.components) {
            assert_eq!(mat.shape(), entry.shape.as_slice());
        }
    }

    #[test]
    fn prompt_labels_do_not_change_loss() {
        let p = Params::init(&tiny()).unwrap();
        let a = TokenSequence::new(0, &[3, 4, 5], &[6, 7]);
        let logits = p.forward(&a.tokens).logits;
        // same logits, different labels at prompt positions
        let b = TokenSequence::new(0, &[13, 14, 15], &[6, 7]);
        assert_eq!(cross_entropy(&logits, &a).0, cross_entropy(&logits, &b).0);
        let (_, da) = cross_entropy(&logits, &a);
        assert!(da.slice(s![..a.completion_start - 1, ..]).iter().all(|&g| g == 0.0));
        assert!(p.loss(&a).unwrap().is_finite());
        assert!(p.loss(&TokenSequence::new(0, &[3], &[])).is_err());
        assert!(matches!(p.loss(&TokenSequence::new(0, &[30], &[1])), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn gradient_matches_finite_differences_spot() {
        let p = Params::init(&tiny()).unwrap();
        let seq = TokenSequence::new(0, &[3, 9, 4, 11], &[6, 7, 2]);
        let (_, g) = p.loss_and_grad(&seq).unwrap();
        for (mi, gm) in g.matrices().iter().enumerate() {
            for idx in [(0usize, 0usize), (1, 2), (3, 5)] {
                let idx = (idx.0 % gm.nrows(), idx.1 % gm.ncols());
                let mut plus = p.clone();
                let w = plus.matrices()[mi][idx];
                let h = 1e-5 * (1.0 + w.abs());
                plus.matrices_mut()[mi][idx] = w + h;
                let mut minus = p.clone();
                minus.matrices_mut()[mi][idx] = w - h;
                let fd = (plus.loss(&seq).unwrap() - minus.loss(&seq).unwrap()) / (2.0 * h);
                let an = gm[idx];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "matrix {mi} {idx:?}: fd {fd} vs {an}");
            }
        }
    }
}
