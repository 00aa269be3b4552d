use std::sync::Arc;

use super::{log_sum_exp, PromptSet, SequencePolicy, SequenceScorer};
use crate::seqcore::RewardModel;
use crate::{CoreError, Result};

/// Tolerance for the expert-optimality check at construction.
const EXPERT_OPT_TOL: f64 = 1e-10;

/// A self-contained synthetic alignment world.
///
/// The expert policy is, by construction, the exact optimum of the
/// KL-regularized objective under the ground-truth reward `r*` and the
/// reference policy, so the realizability assumption behind maximum
/// likelihood reward recovery holds exactly.
#[derive(Debug, Clone)]
pub struct Instance {
    vocab: u32,
    horizon: u32,
    prompt_set: Arc<PromptSet>,
    r_star: RewardModel,
    pi_ref: SequencePolicy,
    pi_expert: SequencePolicy,
    beta: f64,
    c_r: f64,
    /// Lower bound on `ln π_ref(y|x)`; the realized `ln(min π_ref)`.
    c_p: f64,
    seed: u64,
}

impl Instance {
    /// Assemble and validate an instance from its parts.
    ///
    /// Checks that the expert equals the closed-form Gibbs tilt of the
    /// reference under `r*` within 1e-10 per entry and that every reference
    /// log-probability is at least `c_p`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vocab: u32,
        horizon: u32,
        prompt_set: Arc<PromptSet>,
        r_star: RewardModel,
        pi_ref: SequencePolicy,
        pi_expert: SequencePolicy,
        beta: f64,
        c_p: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(CoreError::invalid("instance", format!("beta must be positive, got {beta}")));
        }
        if !prompt_set.same_as(pi_ref.prompts()) || !prompt_set.same_as(pi_expert.prompts()) || !prompt_set.same_as(r_star.prompts()) {
            return Err(CoreError::PromptSetMismatch);
        }
        if pi_ref.min_prob() <= 0.0 {
            return Err(CoreError::invalid("instance", "reference policy has a zero probability"));
        }
        if pi_ref.min_prob().ln() < c_p - 1e-12 {
            return Err(CoreError::invalid(
                "instance",
                format!("ln min π_ref = {} below C_p = {c_p}", pi_ref.min_prob().ln()),
            ));
        }

        // π_expert must match π_ref·exp(r*/β) / Z per entry.
        let m = pi_ref.n_completions();
        for p in 0..prompt_set.len() {
            let ref_row = pi_ref.row(p);
            let logits: Vec<f64> = (0..m)
                .map(|j| ref_row[j].ln() + r_star.score_indexed(p, j) / beta)
                .collect();
            let log_z = log_sum_exp(&logits);
            for (j, logit) in logits.iter().enumerate() {
                let expected = (logit - log_z).exp();
                let actual = pi_expert.prob_indexed(p, j);
                if (expected - actual).abs() > EXPERT_OPT_TOL {
                    return Err(CoreError::invalid(
                        "instance",
                        format!(
                            "expert policy is not the closed-form optimum: prompt {p}, completion {j}: {actual} vs {expected}"
                        ),
                    ));
                }
            }
        }

        let c_r = r_star.c_r();
        Ok(Instance {
            vocab,
            horizon,
            prompt_set,
            r_star,
            pi_ref,
            pi_expert,
            beta,
            c_r,
            c_p,
            seed,
        })
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn n_completions(&self) -> usize {
        self.pi_ref.n_completions()
    }

    pub fn prompt_set(&self) -> &Arc<PromptSet> {
        &self.prompt_set
    }

    pub fn r_star(&self) -> &RewardModel {
        &self.r_star
    }

    pub fn pi_ref(&self) -> &SequencePolicy {
        &self.pi_ref
    }

    pub fn pi_expert(&self) -> &SequencePolicy {
        &self.pi_expert
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn c_r(&self) -> f64 {
        self.c_r
    }

    pub fn c_p(&self) -> f64 {
        self.c_p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}
