//! Deterministic training of the micro model and finite-difference checks.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::ToySample;
use super::model::{MicroModelConfig, Params, TokenSequence};
use crate::error::{Error, Result};
use crate::manifest::ComponentId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 60, lr: 1e-2, batch: 32 }
    }
}

/// Mean per-sample loss over a corpus.
pub fn corpus_loss(params: &Params, samples: &[ToySample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += params.loss(&s.sequence())?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Minibatch Adam on the mean completion cross-entropy. Single-threaded;
/// batches are drawn from a seeded per-epoch shuffle, so the result is a
/// pure function of the inputs.
pub fn train_micro_model(config: &MicroModelConfig, samples: &[ToySample], train: &TrainConfig) -> Result<Params> {
    if samples.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    let mut params = Params::init(config)?;
    if train.steps == 0 {
        return Ok(params);
    }
    let seqs: Vec<TokenSequence> = samples.iter().map(ToySample::sequence).collect();
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m = Params::zeros(config);
    let mut v = Params::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut cursor = order.len();
    let batch = train.batch.clamp(1, seqs.len());

    for step in 0..train.steps {
        let mut grad = Params::zeros(config);
        let mut loss = 0.0;
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (l, g) = params.loss_and_grad(&seqs[order[cursor]])?;
            cursor += 1;
            loss += l;
            grad.add_scaled(&g, 1.0 / batch as f64);
        }
        loss /= batch as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for ((p, g), (mm, vv)) in params
            .matrices_mut()
            .into_iter()
            .zip(grad.matrices())
            .zip(m.matrices_mut().into_iter().zip(v.matrices_mut()))
        {
            adam_update(p, g, mm, vv, train.lr, (b1, b2, eps), (c1, c2));
        }
    }
    Ok(params)
}

fn adam_update(
    p: &mut Array2<f64>,
    g: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    lr: f64,
    (b1, b2, eps): (f64, f64, f64),
    (c1, c2): (f64, f64),
) {
    m.zip_mut_with(g, |mi, &gi| *mi = b1 * *mi + (1.0 - b1) * gi);
    v.zip_mut_with(g, |vi, &gi| *vi = b2 * *vi + (1.0 - b2) * gi * gi);
    ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pi, &mi, &vi| {
        *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
    });
}

/// Worst finite-difference disagreement for one component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub component: ComponentId,
    pub coords: usize,
    pub max_rel_err: f64,
}

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Compares analytic gradients with central differences
/// `(L(w+h) - L(w-h)) / 2h`, `h = 1e-5 (1 + |w|)`, on `coords` seeded
/// coordinates per component.
pub fn finite_difference_check(
    params: &Params,
    seq: &TokenSequence,
    coords: usize,
    seed: u64,
) -> Result<Vec<GradCheck>> {
    let manifest = params.config.manifest()?;
    let (_, grad) = params.loss_and_grad(seq)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(manifest.len());
    let mut work = params.clone();
    for (mi, entry) in manifest.components.iter().enumerate() {
        let (rows, cols) = (entry.shape[0], entry.shape[1]);
        let mut worst = 0.0f64;
        for _ in 0..coords {
            let idx = (rng.random_range(0..rows), rng.random_range(0..cols));
            let w = params.matrices()[mi][idx];
            let h = 1e-5 * (1.0 + w.abs());
            work.matrices_mut()[mi][idx] = w + h;
            let lp = work.loss(seq)?;
            work.matrices_mut()[mi][idx] = w - h;
            let lm = work.loss(seq)?;
            work.matrices_mut()[mi][idx] = w;
            let fd = (lp - lm) / (2.0 * h);
            let an = grad.matrices()[mi][idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(REL_ERR_FLOOR);
            worst = worst.max(rel);
        }
        out.push(GradCheck { component: entry.id, coords, max_rel_err: worst });
    }
    Ok(out)
}
