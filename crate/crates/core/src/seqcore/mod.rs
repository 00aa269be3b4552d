//! Token sequences, prompt sets, exact sequence policies, bounded reward
//! models, and synthetic alignment instances.
//!
//! Completions have a fixed horizon `H` over a vocabulary of `V` tokens, so
//! the completion space is exactly `V^H` sequences, enumerable in
//! lexicographic order. Every type here is immutable after construction and
//! safe to share across threads.

mod instance;
mod policy;
mod reward;

pub use instance::Instance;
pub use policy::{SequencePolicy, NORMALIZATION_TOL, REF_POLICY_FLOOR};
pub use reward::{RewardKind, RewardModel, SequenceScorer};

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// Default cap on `V^H` for exhaustive enumeration.
pub const ENUMERATION_CAP: usize = 1_000_000;

/// An ordered list of token ids, each in `[0, V)`.
///
/// Used for both prompts and completions; completions additionally have
/// length exactly `H` for whatever instance they belong to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(tokens: Vec<u32>) -> Self {
        TokenSeq(tokens)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Check that every token id is below `vocab`.
    pub fn check_vocab(&self, vocab: u32) -> Result<()> {
        if self.0.iter().any(|&t| t >= vocab) {
            return Err(CoreError::TokenOutOfRange);
        }
        Ok(())
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(tokens: Vec<u32>) -> Self {
        TokenSeq(tokens)
    }
}

impl From<&[u32]> for TokenSeq {
    fn from(tokens: &[u32]) -> Self {
        TokenSeq(tokens.to_vec())
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{t}")?;
        }
        write!(f, "]")
    }
}

/// Number of length-`horizon` completions over `vocab` tokens, if it fits
/// under `cap`.
pub fn completion_space(vocab: u32, horizon: u32, cap: usize) -> Result<usize> {
    let mut n: u128 = 1;
    for _ in 0..horizon {
        n *= vocab as u128;
        if n > cap as u128 {
            return Err(CoreError::EnumerationTooLarge {
                vocab,
                horizon,
                cap,
            });
        }
    }
    Ok(n as usize)
}

/// Lexicographic index of a completion, i.e. its rank in
/// [`enumerate_completions`] order.
pub fn completion_index(seq: &TokenSeq, vocab: u32) -> usize {
    let mut idx = 0usize;
    for &t in seq.tokens() {
        idx = idx * vocab as usize + t as usize;
    }
    idx
}

/// Inverse of [`completion_index`].
pub fn completion_from_index(mut idx: usize, vocab: u32, horizon: u32) -> TokenSeq {
    let mut tokens = vec![0u32; horizon as usize];
    for slot in tokens.iter_mut().rev() {
        *slot = (idx % vocab as usize) as u32;
        idx /= vocab as usize;
    }
    TokenSeq(tokens)
}

/// All `V^H` completions in lexicographic order.
///
/// Errors with [`CoreError::EnumerationTooLarge`] when `V^H` exceeds
/// [`ENUMERATION_CAP`]; see [`enumerate_completions_capped`] for a custom cap.
pub fn enumerate_completions(vocab: u32, horizon: u32) -> Result<Vec<TokenSeq>> {
    enumerate_completions_capped(vocab, horizon, ENUMERATION_CAP)
}

pub fn enumerate_completions_capped(
    vocab: u32,
    horizon: u32,
    cap: usize,
) -> Result<Vec<TokenSeq>> {
    let n = completion_space(vocab, horizon, cap)?;
    Ok((0..n)
        .map(|j| completion_from_index(j, vocab, horizon))
        .collect())
}

/// A finite prompt distribution: prompts plus a probability for each.
///
/// Prompts must be distinct and weights must sum to 1 within 1e-12.
#[derive(Debug, Clone)]
pub struct PromptSet {
    prompts: Vec<TokenSeq>,
    weights: Vec<f64>,
    index: HashMap<TokenSeq, usize>,
}

impl PromptSet {
    /// Uniform distribution over the given prompts.
    pub fn uniform(prompts: Vec<TokenSeq>) -> Result<Self> {
        let n = prompts.len();
        Self::with_weights(prompts, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn with_weights(prompts: Vec<TokenSeq>, weights: Vec<f64>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(CoreError::invalid("prompt set", "no prompts"));
        }
        if prompts.len() != weights.len() {
            return Err(CoreError::invalid(
                "prompt set",
                "weights length differs from prompts length",
            ));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CoreError::invalid("prompt set", "negative or non-finite weight"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(CoreError::invalid(
                "prompt set",
                format!("weights sum to {total}, expected 1"),
            ));
        }
        let mut index = HashMap::with_capacity(prompts.len());
        for (i, p) in prompts.iter().enumerate() {
            if index.insert(p.clone(), i).is_some() {
                return Err(CoreError::invalid("prompt set", format!("duplicate prompt {p}")));
            }
        }
        Ok(PromptSet {
            prompts,
            weights,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn prompts(&self) -> &[TokenSeq] {
        &self.prompts
    }

    pub fn prompt(&self, i: usize) -> &TokenSeq {
        &self.prompts[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    /// Index of a prompt in this set, if present.
    pub fn position(&self, prompt: &TokenSeq) -> Option<usize> {
        self.index.get(prompt).copied()
    }

    /// Like [`position`](Self::position) but erroring on unknown prompts.
    pub fn require(&self, prompt: &TokenSeq) -> Result<usize> {
        self.position(prompt).ok_or(CoreError::PromptNotInSupport)
    }

    /// Structural equality on (prompts, weights); cheap at desk scale.
    pub fn same_as(&self, other: &PromptSet) -> bool {
        std::ptr::eq(self, other) || (self.prompts == other.prompts && self.weights == other.weights)
    }
}

/// Numerically stable `ln Σ exp(x_i)` with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let sum: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + sum.ln()
}

/// Stable `ln(1 + e^x)`; `-ln σ(z) = softplus(-z)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
