//! Noise-contrastive prediction losses over relational paths.

use ndarray::ArrayView1;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::encoder::{Binder, Encoder, Mode, PathBatch, ENTITY_TABLE, RELATION_TABLE};
use crate::error::{Error, Result};

/// Frequencies are raised to this power before normalization.
pub const NEGATIVE_EXPONENT: f64 = 0.75;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NceVariant {
    /// `-log(1 - p)` per negative.
    #[default]
    Canonical,
    /// `1 - log p` per negative, the alternative printed form.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NceConfig {
    /// Negatives per prediction.
    pub k: usize,
    pub variant: NceVariant,
    pub seed: u64,
}

impl Default for NceConfig {
    fn default() -> Self {
        NceConfig {
            k: 10,
            variant: NceVariant::Canonical,
            seed: 0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Probability that `candidate` fills the slot described by `context`.
pub fn score(candidate: ArrayView1<f64>, context: ArrayView1<f64>) -> f64 {
    sigmoid(candidate.dot(&context))
}

/// Sampling table with mass proportional to `count^(3/4)`.
#[derive(Clone, Debug)]
pub struct NegativeDistribution {
    probabilities: Vec<f64>,
    sampler: WeightedIndex<f64>,
}

pub fn build_negative_distribution(counts: &[u64]) -> Result<NegativeDistribution> {
    let masses: Vec<f64> = counts
        .iter()
        .map(|&c| (c as f64).powf(NEGATIVE_EXPONENT))
        .collect();
    let total: f64 = masses.iter().sum();
    if total <= 0.0 {
        return Err(Error::data("negative sampling table has no positive counts"));
    }
    let sampler = WeightedIndex::new(&masses)
        .map_err(|e| Error::data(format!("negative sampling table: {e}")))?;
    Ok(NegativeDistribution {
        probabilities: masses.iter().map(|m| m / total).collect(),
        sampler,
    })
}

impl NegativeDistribution {
    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        self.sampler.sample(rng)
    }

    /// `k` draws with replacement, none equal to `target` (rejection). When
    /// the target carries all the mass, the other elements are drawn
    /// uniformly instead.
    pub fn sample_excluding(&self, target: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        let n = self.len();
        if k > 0 && k > n.saturating_sub(1) {
            return Err(Error::config(format!(
                "{k} negatives requested from a vocabulary of {n}"
            )));
        }
        let target_mass = self.probabilities.get(target).copied().unwrap_or(0.0);
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let x = if target_mass >= 1.0 - 1e-12 {
                let i = rng.gen_range(0..n - 1);
                if i >= target {
                    i + 1
                } else {
                    i
                }
            } else {
                self.sample(rng)
            };
            if x != target {
                out.push(x);
            }
        }
        Ok(out)
    }
}

/// Loss of one prediction: `-log p(target)` plus one term per negative.
pub fn nce_loss(
    target: ArrayView1<f64>,
    context: ArrayView1<f64>,
    negatives: &[ArrayView1<f64>],
    variant: NceVariant,
) -> f64 {
    let mut loss = -log_sigmoid(target.dot(&context));
    for n in negatives {
        let y = n.dot(&context);
        loss += match variant {
            NceVariant::Canonical => -log_sigmoid(-y),
            NceVariant::Literal => 1.0 - log_sigmoid(y),
        };
    }
    loss
}

/// Sampled negatives for a [`PathBatch`], position-major like
/// [`Encoder::contexts`]: row `p * batch + b` holds `k` ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchNegatives {
    pub k_entity: usize,
    pub k_relation: usize,
    pub rows: Vec<Vec<usize>>,
}

/// Effective negative count for a vocabulary: `k`, capped at `size - 1`.
pub fn effective_k(k: usize, dist: &NegativeDistribution) -> usize {
    k.min(dist.len().saturating_sub(1))
}

pub fn sample_batch_negatives(
    batch: &PathBatch,
    k: usize,
    entities: &NegativeDistribution,
    relations: &NegativeDistribution,
    rng: &mut impl Rng,
) -> Result<BatchNegatives> {
    let (n, t) = (batch.len(), batch.length());
    let k_entity = effective_k(k, entities);
    let k_relation = effective_k(k, relations);
    let mut rows = Vec::with_capacity(n * t);
    for p in 0..t {
        for b in 0..n {
            let target = batch.id(b, p) as usize;
            rows.push(if p % 2 == 0 {
                entities.sample_excluding(target, k_entity, rng)?
            } else {
                relations.sample_excluding(target, k_relation, rng)?
            });
        }
    }
    Ok(BatchNegatives {
        k_entity,
        k_relation,
        rows,
    })
}

/// Mean over the batch of the per-path loss: the sum of one NCE term per
/// element, entity negatives at entity positions and relation negatives at
/// relation positions.
pub fn path_loss(
    tape: &mut Tape,
    encoder: &Encoder,
    binder: &mut Binder,
    batch: &PathBatch,
    negatives: &BatchNegatives,
    variant: NceVariant,
    mode: &mut Mode,
) -> Result<Var> {
    let (n, t) = (batch.len(), batch.length());
    if n == 0 {
        return Err(Error::data("empty path batch"));
    }
    if negatives.rows.len() != n * t {
        return Err(Error::data("negatives do not match the batch"));
    }
    let ctx = encoder.contexts(tape, binder, batch, mode)?;
    let mut terms = Vec::new();
    for (parity, table) in [(0, ENTITY_TABLE), (1, RELATION_TABLE)] {
        let rows: Vec<usize> = (0..t)
            .filter(|p| p % 2 == parity)
            .flat_map(|p| (0..n).map(move |b| p * n + b))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let targets: Vec<usize> = rows.iter().map(|&r| batch.id(r % n, r / n) as usize).collect();
        let c = tape.gather_rows(ctx, &rows);
        let pos = binder.rows(tape, table, &targets)?;
        let y = tape.row_dot(c, pos);
        let ly = tape.log_sigmoid(y);
        let s = tape.sum(ly);
        terms.push(tape.scale(s, -1.0));

        let rep: Vec<usize> = rows
            .iter()
            .flat_map(|&r| std::iter::repeat_n(r, negatives.rows[r].len()))
            .collect();
        if rep.is_empty() {
            continue;
        }
        let ids: Vec<usize> = rows.iter().flat_map(|&r| negatives.rows[r].iter().copied()).collect();
        let cr = tape.gather_rows(ctx, &rep);
        let neg = binder.rows(tape, table, &ids)?;
        let yn = tape.row_dot(cr, neg);
        match variant {
            NceVariant::Canonical => {
                let m = tape.scale(yn, -1.0);
                let l = tape.log_sigmoid(m);
                let s = tape.sum(l);
                terms.push(tape.scale(s, -1.0));
            }
            NceVariant::Literal => {
                let l = tape.log_sigmoid(yn);
                let s = tape.sum(l);
                let s = tape.scale(s, -1.0);
                let ones = tape.constant(Mat::from_elem((1, 1), ids.len() as f64));
                terms.push(tape.add(s, ones));
            }
        }
    }
    let total = tape.add_all(&terms);
    Ok(tape.scale(total, 1.0 / n as f64))
}
