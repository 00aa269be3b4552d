use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{completion_from_index, completion_index, completion_space, PromptSet, TokenSeq};
use crate::{seeding, CoreError, Result};

/// Per-prompt probability rows must sum to 1 within this tolerance.
pub const NORMALIZATION_TOL: f64 = 1e-10;

/// Probability floor applied to reference-style policies before
/// renormalization; fixes the log-probability lower bound `C_p ≈ ln(floor)`.
pub const REF_POLICY_FLOOR: f64 = 1e-6;

/// An exact distribution over all `V^H` completions, per prompt.
///
/// The sequence-level table is the canonical representation; autoregressive
/// conditionals are a derived view (see
/// [`logprob_autoregressive`](Self::logprob_autoregressive)). Rows are stored
/// row-major as `probs[prompt * V^H + completion]`.
#[derive(Debug, Clone)]
pub struct SequencePolicy {
    prompts: Arc<PromptSet>,
    vocab: u32,
    horizon: u32,
    n_completions: usize,
    probs: Vec<f64>,
}

impl SequencePolicy {
    /// Build a policy from per-prompt probability rows, validating shape,
    /// non-negativity, and normalization.
    pub fn from_table(
        prompts: Arc<PromptSet>,
        vocab: u32,
        horizon: u32,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n_completions = completion_space(vocab, horizon, super::ENUMERATION_CAP)?;
        if rows.len() != prompts.len() {
            return Err(CoreError::invalid(
                "policy table",
                format!("{} rows for {} prompts", rows.len(), prompts.len()),
            ));
        }
        let mut probs = Vec::with_capacity(prompts.len() * n_completions);
        for (p, row) in rows.iter().enumerate() {
            if row.len() != n_completions {
                return Err(CoreError::invalid(
                    "policy table",
                    format!("row {p} has {} entries, expected {n_completions}", row.len()),
                ));
            }
            if row.iter().any(|q| !q.is_finite() || *q < 0.0) {
                return Err(CoreError::invalid(
                    "policy table",
                    format!("row {p} has a negative or non-finite probability"),
                ));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > NORMALIZATION_TOL {
                return Err(CoreError::invalid(
                    "policy table",
                    format!("row {p} sums to {total}"),
                ));
            }
            probs.extend_from_slice(row);
        }
        Ok(SequencePolicy {
            prompts,
            vocab,
            horizon,
            n_completions,
            probs,
        })
    }

    /// Uniform distribution over all completions for every prompt.
    pub fn uniform(prompts: Arc<PromptSet>, vocab: u32, horizon: u32) -> Result<Self> {
        let m = completion_space(vocab, horizon, super::ENUMERATION_CAP)?;
        let rows = vec![vec![1.0 / m as f64; m]; prompts.len()];
        Self::from_table(prompts, vocab, horizon, rows)
    }

    /// Point mass on one completion index per prompt.
    pub fn point_mass(
        prompts: Arc<PromptSet>,
        vocab: u32,
        horizon: u32,
        targets: &[usize],
    ) -> Result<Self> {
        let m = completion_space(vocab, horizon, super::ENUMERATION_CAP)?;
        if targets.len() != prompts.len() {
            return Err(CoreError::invalid("point mass", "one target per prompt required"));
        }
        let rows = targets
            .iter()
            .map(|&j| {
                let mut row = vec![0.0; m];
                row[j] = 1.0;
                row
            })
            .collect();
        Self::from_table(prompts, vocab, horizon, rows)
    }

    pub fn prompts(&self) -> &Arc<PromptSet> {
        &self.prompts
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn n_completions(&self) -> usize {
        self.n_completions
    }

    pub fn row(&self, prompt_idx: usize) -> &[f64] {
        let base = prompt_idx * self.n_completions;
        &self.probs[base..base + self.n_completions]
    }

    pub fn prob_indexed(&self, prompt_idx: usize, completion_idx: usize) -> f64 {
        self.probs[prompt_idx * self.n_completions + completion_idx]
    }

    /// Resolve a prompt and completion to table indices, validating horizon
    /// and vocabulary.
    pub fn resolve(&self, prompt: &TokenSeq, completion: &TokenSeq) -> Result<(usize, usize)> {
        let p = self.prompts.require(prompt)?;
        if completion.len() != self.horizon as usize {
            return Err(CoreError::HorizonMismatch {
                expected: self.horizon as usize,
                actual: completion.len(),
            });
        }
        completion.check_vocab(self.vocab)?;
        Ok((p, completion_index(completion, self.vocab)))
    }

    /// Sequence probability `π(y|x)` from the exact table.
    pub fn prob(&self, prompt: &TokenSeq, completion: &TokenSeq) -> Result<f64> {
        let (p, j) = self.resolve(prompt, completion)?;
        Ok(self.prob_indexed(p, j))
    }

    /// `ln π(y|x)`; `-inf` when the table entry is zero.
    pub fn logprob(&self, prompt: &TokenSeq, completion: &TokenSeq) -> Result<f64> {
        Ok(self.prob(prompt, completion)?.ln())
    }

    /// `ln π(y|x)` through the autoregressive view: the sum over positions of
    /// log conditional probabilities, each conditional obtained by
    /// marginalizing the sequence table over the matching prefix block.
    ///
    /// Agrees with [`logprob`](Self::logprob) up to floating-point error; the
    /// sequence table is canonical.
    pub fn logprob_autoregressive(&self, prompt: &TokenSeq, completion: &TokenSeq) -> Result<f64> {
        let (p, _) = self.resolve(prompt, completion)?;
        let row = self.row(p);
        let v = self.vocab as usize;
        let mut total = 0.0;
        let mut prefix_idx = 0usize; // lexicographic index of y_{1:h} as an h-length prefix
        let mut block = self.n_completions; // width of the block sharing the current prefix
        let mut prefix_mass = 1.0;
        for &t in completion.tokens() {
            prefix_idx = prefix_idx * v + t as usize;
            block /= v;
            let start = prefix_idx * block;
            let next_mass: f64 = row[start..start + block].iter().sum();
            total += (next_mass / prefix_mass).ln();
            prefix_mass = next_mass;
        }
        Ok(total)
    }

    /// Draw `n` completions i.i.d. from `π(·|x)`.
    ///
    /// A pure function of `(self, prompt, n, seed)`.
    pub fn sample(&self, prompt: &TokenSeq, n: usize, seed: u64) -> Result<Vec<TokenSeq>> {
        if n == 0 {
            return Err(CoreError::EmptySampleRequest);
        }
        let p = self.prompts.require(prompt)?;
        let mut rng = seeding::rng(seed);
        let cdf = CategoricalCdf::new(self.row(p));
        Ok((0..n)
            .map(|_| completion_from_index(cdf.draw(&mut rng), self.vocab, self.horizon))
            .collect())
    }

    /// Draw `n` completion indices using a caller-provided RNG stream.
    pub(crate) fn sample_indices(&self, prompt_idx: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let cdf = CategoricalCdf::new(self.row(prompt_idx));
        (0..n).map(|_| cdf.draw(rng)).collect()
    }

    /// Smallest probability anywhere in the table.
    pub fn min_prob(&self) -> f64 {
        self.probs.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Floor every probability at `eps` and renormalize per prompt.
    ///
    /// Returns `self` unchanged (bit-exact) when no entry is below `eps`.
    pub fn floored(&self, eps: f64) -> SequencePolicy {
        if self.min_prob() >= eps {
            return self.clone();
        }
        let mut out = self.clone();
        for p in 0..self.prompts.len() {
            let base = p * self.n_completions;
            let row = &mut out.probs[base..base + self.n_completions];
            for q in row.iter_mut() {
                *q = q.max(eps);
            }
            let total: f64 = row.iter().sum();
            for q in row.iter_mut() {
                *q /= total;
            }
        }
        out
    }

    /// Per-prompt KL divergences `KL(self(·|x) ‖ other(·|x))`.
    ///
    /// Errors with [`CoreError::KlUndefined`] if `self` puts mass where
    /// `other` has none.
    pub fn kl_rows(&self, other: &SequencePolicy) -> Result<Vec<f64>> {
        if !self.prompts.same_as(&other.prompts) {
            return Err(CoreError::PromptSetMismatch);
        }
        if self.n_completions != other.n_completions {
            return Err(CoreError::invalid("kl", "completion spaces differ"));
        }
        (0..self.prompts.len())
            .map(|p| {
                let mut kl = 0.0;
                for (q, r) in self.row(p).iter().zip(other.row(p)) {
                    if *q == 0.0 {
                        continue;
                    }
                    if *r == 0.0 {
                        return Err(CoreError::KlUndefined);
                    }
                    kl += q * (q.ln() - r.ln());
                }
                Ok(kl)
            })
            .collect()
    }
}

/// Cumulative distribution over completion indices for inverse-CDF sampling.
pub(crate) struct CategoricalCdf {
    cdf: Vec<f64>,
}

impl CategoricalCdf {
    pub(crate) fn new(row: &[f64]) -> Self {
        let mut cdf = Vec::with_capacity(row.len());
        let mut acc = 0.0;
        for q in row {
            acc += q;
            cdf.push(acc);
        }
        CategoricalCdf { cdf }
    }

    pub(crate) fn draw(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        // First index with cdf > u; clamp guards the u ≈ 1 rounding edge.
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}
