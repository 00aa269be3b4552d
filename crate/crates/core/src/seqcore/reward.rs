use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{completion_space, sigmoid, PromptSet, TokenSeq};
use crate::{seeding, CoreError, Result};

/// Anything that assigns a real score to a (prompt, completion) pair.
///
/// Implemented by [`RewardModel`] and by the DPO-style implicit reward
/// `β·ln(π/π_ref)`. Indexed access assumes the caller resolved indices
/// against the shared prompt set and completion enumeration.
pub trait SequenceScorer {
    fn score_indexed(&self, prompt_idx: usize, completion_idx: usize) -> f64;

    fn score_seq(&self, prompt: &TokenSeq, completion: &TokenSeq) -> Result<f64>;
}

/// Parameterization of the raw (pre-squash) score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardKind {
    /// One parameter per (prompt, completion) pair.
    Tabular,
    /// `θ · φ(x, y)` with fixed random features per pair.
    Linear { feature_dim: usize, feature_seed: u64 },
}

/// A bounded, differentiable reward model `r(x, y; θ) = C_r · σ(raw(x, y; θ))`.
///
/// The sigmoid squash keeps every score strictly inside `(0, C_r)` for all
/// finite parameters, so the boundedness assumption the concentration bound
/// relies on holds everywhere without clamping.
#[derive(Debug, Clone)]
pub struct RewardModel {
    prompts: Arc<PromptSet>,
    vocab: u32,
    horizon: u32,
    n_completions: usize,
    kind: RewardKind,
    c_r: f64,
    params: Vec<f64>,
    /// Linear kind only: row-major `[pair_idx * dim .. (pair_idx+1) * dim]`.
    features: Vec<f64>,
}

impl RewardModel {
    /// Tabular reward with all raw parameters at zero (score `C_r / 2`).
    pub fn tabular(prompts: Arc<PromptSet>, vocab: u32, horizon: u32, c_r: f64) -> Result<Self> {
        let m = completion_space(vocab, horizon, super::ENUMERATION_CAP)?;
        let n = prompts.len() * m;
        Self::build(prompts, vocab, horizon, RewardKind::Tabular, c_r, vec![0.0; n])
    }

    /// Tabular reward with explicit raw parameters, one per (prompt,
    /// completion) pair in row-major order.
    pub fn tabular_with_params(
        prompts: Arc<PromptSet>,
        vocab: u32,
        horizon: u32,
        c_r: f64,
        params: Vec<f64>,
    ) -> Result<Self> {
        Self::build(prompts, vocab, horizon, RewardKind::Tabular, c_r, params)
    }

    /// Linear reward `θ · φ(x, y)` with `dim` fixed features per pair, drawn
    /// once from `N(0, 1/dim)` using `feature_seed`. Parameters start at zero.
    pub fn linear(
        prompts: Arc<PromptSet>,
        vocab: u32,
        horizon: u32,
        c_r: f64,
        feature_dim: usize,
        feature_seed: u64,
    ) -> Result<Self> {
        Self::build(
            prompts,
            vocab,
            horizon,
            RewardKind::Linear {
                feature_dim,
                feature_seed,
            },
            c_r,
            vec![0.0; feature_dim],
        )
    }

    /// Linear reward with explicit parameters.
    pub fn linear_with_params(
        prompts: Arc<PromptSet>,
        vocab: u32,
        horizon: u32,
        c_r: f64,
        feature_dim: usize,
        feature_seed: u64,
        params: Vec<f64>,
    ) -> Result<Self> {
        Self::build(
            prompts,
            vocab,
            horizon,
            RewardKind::Linear {
                feature_dim,
                feature_seed,
            },
            c_r,
            params,
        )
    }

    fn build(
        prompts: Arc<PromptSet>,
        vocab: u32,
        horizon: u32,
        kind: RewardKind,
        c_r: f64,
        params: Vec<f64>,
    ) -> Result<Self> {
        if !(c_r > 0.0) || !c_r.is_finite() {
            return Err(CoreError::invalid("reward", format!("C_r must be positive, got {c_r}")));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(CoreError::invalid("reward", "non-finite parameter"));
        }
        let m = completion_space(vocab, horizon, super::ENUMERATION_CAP)?;
        let n_pairs = prompts.len() * m;
        let features = match kind {
            RewardKind::Tabular => {
                if params.len() != n_pairs {
                    return Err(CoreError::invalid(
                        "reward",
                        format!("{} tabular params for {n_pairs} pairs", params.len()),
                    ));
                }
                Vec::new()
            }
            RewardKind::Linear {
                feature_dim,
                feature_seed,
            } => {
                if feature_dim == 0 {
                    return Err(CoreError::invalid("reward", "feature_dim must be positive"));
                }
                if params.len() != feature_dim {
                    return Err(CoreError::invalid(
                        "reward",
                        format!("{} params for feature_dim {feature_dim}", params.len()),
                    ));
                }
                let mut rng = seeding::rng(feature_seed);
                let scale = 1.0 / (feature_dim as f64).sqrt();
                (0..n_pairs * feature_dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                    .collect()
            }
        };
        Ok(RewardModel {
            prompts,
            vocab,
            horizon,
            n_completions: m,
            kind,
            c_r,
            params,
            features,
        })
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

    pub fn kind(&self) -> &RewardKind {
        &self.kind
    }

    pub fn c_r(&self) -> f64 {
        self.c_r
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) {
        debug_assert_eq!(params.len(), self.params.len());
        self.params.copy_from_slice(params);
    }

    /// Raw pre-sigmoid score for a resolved pair.
    pub fn raw_indexed(&self, prompt_idx: usize, completion_idx: usize) -> f64 {
        let pair = prompt_idx * self.n_completions + completion_idx;
        match self.kind {
            RewardKind::Tabular => self.params[pair],
            RewardKind::Linear { feature_dim, .. } => {
                let base = pair * feature_dim;
                self.params
                    .iter()
                    .zip(&self.features[base..base + feature_dim])
                    .map(|(t, f)| t * f)
                    .sum()
            }
        }
    }

    fn resolve(&self, prompt: &TokenSeq, completion: &TokenSeq) -> Result<(usize, usize)> {
        let p = self.prompts.position(prompt).ok_or(CoreError::PairNotInTable)?;
        if completion.len() != self.horizon as usize {
            return Err(CoreError::HorizonMismatch {
                expected: self.horizon as usize,
                actual: completion.len(),
            });
        }
        if completion.check_vocab(self.vocab).is_err() {
            return Err(CoreError::PairNotInTable);
        }
        Ok((p, super::completion_index(completion, self.vocab)))
    }

    /// Bounded score `C_r · σ(raw)`.
    pub fn score(&self, prompt: &TokenSeq, completion: &TokenSeq) -> Result<f64> {
        let (p, j) = self.resolve(prompt, completion)?;
        Ok(self.score_indexed(p, j))
    }

    /// `∂r/∂raw` at a resolved pair: `C_r · σ(raw) · (1 − σ(raw))`.
    pub fn score_slope_indexed(&self, prompt_idx: usize, completion_idx: usize) -> f64 {
        let s = sigmoid(self.raw_indexed(prompt_idx, completion_idx));
        self.c_r * s * (1.0 - s)
    }

    /// Accumulate `scale · ∂r(x, y; θ)/∂θ` into `out`.
    pub fn grad_accumulate(
        &self,
        prompt_idx: usize,
        completion_idx: usize,
        scale: f64,
        out: &mut [f64],
    ) {
        debug_assert_eq!(out.len(), self.params.len());
        let slope = self.score_slope_indexed(prompt_idx, completion_idx);
        match self.kind {
            RewardKind::Tabular => {
                out[prompt_idx * self.n_completions + completion_idx] += scale * slope;
            }
            RewardKind::Linear { feature_dim, .. } => {
                let base = (prompt_idx * self.n_completions + completion_idx) * feature_dim;
                for (o, f) in out.iter_mut().zip(&self.features[base..base + feature_dim]) {
                    *o += scale * slope * f;
                }
            }
        }
    }

    /// Same model with all raw scores negated, i.e. an order-reversing map
    /// `r ↦ C_r − r`.
    pub fn negated(&self) -> RewardModel {
        let mut out = self.clone();
        for p in out.params.iter_mut() {
            *p = -*p;
        }
        out
    }
}

impl SequenceScorer for RewardModel {
    fn score_indexed(&self, prompt_idx: usize, completion_idx: usize) -> f64 {
        self.c_r * sigmoid(self.raw_indexed(prompt_idx, completion_idx))
    }

    fn score_seq(&self, prompt: &TokenSeq, completion: &TokenSeq) -> Result<f64> {
        self.score(prompt, completion)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompts() -> Arc<PromptSet> {
        Arc::new(PromptSet::uniform(vec![TokenSeq::from(vec![0]), TokenSeq::from(vec![1])]).unwrap())
    }

    #[test]
    fn zero_raw_scores_half_bound() {
        let r = RewardModel::tabular(prompts(), 2, 2, 5.0).unwrap();
        let s = r.score(&TokenSeq::from(vec![0]), &TokenSeq::from(vec![1, 0])).unwrap();
        assert_eq!(s, 2.5);
    }

    #[test]
    fn saturation_approaches_bound_from_below() {
        let mut r = RewardModel::tabular(prompts(), 2, 2, 5.0).unwrap();
        r.params_mut()[0] = 30.0;
        let s = r.score_indexed(0, 0);
        assert!(s < 5.0 && s > 5.0 - 1e-12);
    }

    #[test]
    fn linear_zero_params_scores_half_bound_everywhere() {
        let r = RewardModel::linear(prompts(), 2, 2, 5.0, 8, 3).unwrap();
        for p in 0..2 {
            for j in 0..4 {
                assert_eq!(r.score_indexed(p, j), 2.5);
            }
        }
    }

    #[test]
    fn scores_stay_inside_open_interval() {
        let mut rng = seeding::rng(0);
        let params: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 80.0 - 40.0).collect();
        let r = RewardModel::tabular_with_params(prompts(), 2, 2, 5.0, params).unwrap();
        for p in 0..2 {
            for j in 0..4 {
                let s = r.score_indexed(p, j);
                assert!(s > 0.0 && s < 5.0);
            }
        }
    }

    #[test]
    fn uncovered_pair_errors() {
        let r = RewardModel::tabular(prompts(), 2, 2, 5.0).unwrap();
        let err = r.score(&TokenSeq::from(vec![7]), &TokenSeq::from(vec![0, 0])).unwrap_err();
        assert_eq!(err.to_string(), "pair not in table");
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn gradient_matches_finite_difference_for_both_kinds() {
        let step = 1e-6;
        for reward in [
            RewardModel::tabular_with_params(prompts(), 2, 2, 5.0, (0..8).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap(),
            RewardModel::linear_with_params(prompts(), 2, 2, 5.0, 4, 9, vec![0.2, -0.4, 0.1, 0.7]).unwrap(),
        ] {
            let mut grad = vec![0.0; reward.n_params()];
            reward.grad_accumulate(1, 2, 1.0, &mut grad);
            for i in 0..reward.n_params() {
                let mut plus = reward.clone();
                plus.params_mut()[i] += step;
                let mut minus = reward.clone();
                minus.params_mut()[i] -= step;
                let fd = (plus.score_indexed(1, 2) - minus.score_indexed(1, 2)) / (2.0 * step);
                assert!((grad[i] - fd).abs() < 1e-7, "param {i}: {} vs {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn negated_reverses_order() {
        let mut r = RewardModel::tabular(prompts(), 2, 2, 5.0).unwrap();
        r.params_mut()[0] = 1.0;
        r.params_mut()[1] = -1.0;
        let n = r.negated();
        assert!(r.score_indexed(0, 0) > r.score_indexed(0, 1));
        assert!(n.score_indexed(0, 0) < n.score_indexed(0, 1));
        assert!((n.score_indexed(0, 0) + r.score_indexed(0, 0) - 5.0).abs() < 1e-12);
    }
}
