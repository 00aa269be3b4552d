//! Scalar objectives: SFT likelihood, Bradley-Terry reward loss, the
//! KL-regularized policy objective, and the DPO preference loss, plus the
//! datasets they consume.
//!
//! The likelihood surrogate, closed-form optimal policy, and exact gradients
//! live in [`surrogate`]; everything is re-exported from here.

mod surrogate;

pub use surrogate::{
    bi_level_surrogate, exact_likelihood, optimal_policy, single_level_surrogate,
    stochastic_gradient, surrogate_gradient, ImplicitReward,
};

use crate::seqcore::{softplus, PromptSet, SequencePolicy, SequenceScorer, TokenSeq};
use crate::{CoreError, Result};

/// Prompt–completion pairs, optionally weighted.
///
/// Weights turn the dataset into a full-population ("infinite data")
/// distribution over pairs, which makes the finite-sample surrogate coincide
/// exactly with the population likelihood.
#[derive(Debug, Clone)]
pub struct DemonstrationDataset {
    items: Vec<(TokenSeq, TokenSeq)>,
    weights: Option<Vec<f64>>,
}

impl DemonstrationDataset {
    pub fn new(items: Vec<(TokenSeq, TokenSeq)>) -> Result<Self> {
        Self::validate_items(&items)?;
        Ok(DemonstrationDataset { items, weights: None })
    }

    pub fn with_weights(items: Vec<(TokenSeq, TokenSeq)>, weights: Vec<f64>) -> Result<Self> {
        Self::validate_items(&items)?;
        if weights.len() != items.len() {
            return Err(CoreError::invalid("demonstrations", "weights length mismatch"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CoreError::invalid("demonstrations", "negative or non-finite weight"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(CoreError::invalid(
                "demonstrations",
                format!("weights sum to {total}, expected 1"),
            ));
        }
        Ok(DemonstrationDataset {
            items,
            weights: Some(weights),
        })
    }

    /// The full expert population: one weighted item per (prompt, completion)
    /// pair with weight `μ(x) · π_expert(y|x)`.
    pub fn full_population(instance: &crate::seqcore::Instance) -> Self {
        let expert = instance.pi_expert();
        let prompts = instance.prompt_set();
        let m = instance.n_completions();
        let mut items = Vec::with_capacity(prompts.len() * m);
        let mut weights = Vec::with_capacity(prompts.len() * m);
        for p in 0..prompts.len() {
            for j in 0..m {
                items.push((
                    prompts.prompt(p).clone(),
                    crate::seqcore::completion_from_index(j, instance.vocab(), instance.horizon()),
                ));
                weights.push(prompts.weight(p) * expert.prob_indexed(p, j));
            }
        }
        // Weights sum to 1 by construction up to rounding; renormalize so the
        // invariant holds bit-exactly.
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        DemonstrationDataset {
            items,
            weights: Some(weights),
        }
    }

    fn validate_items(items: &[(TokenSeq, TokenSeq)]) -> Result<()> {
        if items.is_empty() {
            return Err(CoreError::EmptyDataset);
        }
        let h = items[0].1.len();
        if items.iter().any(|(_, y)| y.len() != h) {
            return Err(CoreError::invalid("demonstrations", "completions have mixed lengths"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[(TokenSeq, TokenSeq)] {
        &self.items
    }

    pub fn item(&self, i: usize) -> &(TokenSeq, TokenSeq) {
        &self.items[i]
    }

    /// Weight of item `i`; `1/n` for unweighted datasets.
    pub fn weight(&self, i: usize) -> f64 {
        match &self.weights {
            Some(w) => w[i],
            None => 1.0 / self.items.len() as f64,
        }
    }

    pub fn is_weighted(&self) -> bool {
        self.weights.is_some()
    }
}

/// One preference judgment: `chosen` beats `rejected` for `prompt`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceItem {
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
}

/// Prompt–chosen–rejected triples.
#[derive(Debug, Clone)]
pub struct PreferenceDataset {
    items: Vec<PreferenceItem>,
}

impl PreferenceDataset {
    pub fn new(items: Vec<PreferenceItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(CoreError::EmptyDataset);
        }
        if items.iter().any(|it| it.chosen == it.rejected) {
            return Err(CoreError::invalid("preferences", "chosen equals rejected"));
        }
        Ok(PreferenceDataset { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[PreferenceItem] {
        &self.items
    }
}

/// Behavior-cloning loss: `−E_D[ln π(y|x)]`, weighted mean in
/// full-population mode. Non-negative; zero only if the policy is certain on
/// every demonstration.
pub fn sft_loss(policy: &SequencePolicy, demos: &DemonstrationDataset) -> Result<f64> {
    let mut loss = 0.0;
    for (i, (x, y)) in demos.items().iter().enumerate() {
        let w = demos.weight(i);
        if w == 0.0 {
            continue;
        }
        loss -= w * policy.logprob(x, y)?;
    }
    Ok(loss)
}

/// Bradley-Terry reward loss: `−E_P[ln σ(r(x, y_w) − r(x, y_l))]`.
pub fn btl_loss<S: SequenceScorer>(scorer: &S, prefs: &PreferenceDataset) -> Result<f64> {
    let mut loss = 0.0;
    for item in prefs.items() {
        let gap = scorer.score_seq(&item.prompt, &item.chosen)?
            - scorer.score_seq(&item.prompt, &item.rejected)?;
        loss += softplus(-gap);
    }
    Ok(loss / prefs.len() as f64)
}

/// DPO loss: `−E_P[ln σ(β·(Δ_w − Δ_l))]` with `Δ = ln π − ln π_ref`.
pub fn dpo_loss(
    policy: &SequencePolicy,
    pi_ref: &SequencePolicy,
    prefs: &PreferenceDataset,
    beta: f64,
) -> Result<f64> {
    if !policy.prompts().same_as(pi_ref.prompts()) {
        return Err(CoreError::PromptSetMismatch);
    }
    let mut loss = 0.0;
    for item in prefs.items() {
        let dw = policy.logprob(&item.prompt, &item.chosen)?
            - pi_ref.logprob(&item.prompt, &item.chosen)?;
        let dl = policy.logprob(&item.prompt, &item.rejected)?
            - pi_ref.logprob(&item.prompt, &item.rejected)?;
        loss += softplus(-beta * (dw - dl));
    }
    Ok(loss / prefs.len() as f64)
}

/// KL-regularized policy objective, evaluated by exact enumeration:
/// `E_{x∼μ, y∼π}[r(x,y)] − β·E_{x∼μ}[KL(π(·|x) ‖ π_ref(·|x))]`.
pub fn kl_rl_objective<S: SequenceScorer>(
    policy: &SequencePolicy,
    scorer: &S,
    pi_ref: &SequencePolicy,
    prompts: &PromptSet,
    beta: f64,
) -> Result<f64> {
    if !policy.prompts().same_as(prompts) || !pi_ref.prompts().same_as(prompts) {
        return Err(CoreError::PromptSetMismatch);
    }
    let kl = policy.kl_rows(pi_ref)?;
    let mut value = 0.0;
    for (p, kl_p) in kl.iter().enumerate() {
        let row = policy.row(p);
        let expected_reward: f64 = row
            .iter()
            .enumerate()
            .map(|(j, q)| q * scorer.score_indexed(p, j))
            .sum();
        value += prompts.weight(p) * (expected_reward - beta * kl_p);
    }
    Ok(value)
}
