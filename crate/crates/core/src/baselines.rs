//! Demonstration-only baselines: SFT (behavior cloning) and SPIN (iterative
//! DPO against the model's own generations).
//!
//! Both trainers run gradient descent on per-prompt logits with a softmax
//! parameterization, so the optimization is unconstrained and the trained
//! tables stay strictly positive.

use serde::{Deserialize, Serialize};

use crate::evalx;
use crate::irl::{build_synthetic_preferences, PairSelection};
use crate::objectives::{dpo_loss, DemonstrationDataset, PreferenceDataset};
use crate::seqcore::{
    log_sum_exp, sigmoid, Instance, PromptSet, SequencePolicy, REF_POLICY_FLOOR,
};
use crate::{seeding, CoreError, Result};

/// Knobs for [`sft_train`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Items per gradient step; the full dataset is used when this is at
    /// least `|D|`.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            epochs: 30_000,
            learning_rate: 2.0,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CoreError::invalid("sft config", "epochs must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(CoreError::invalid("sft config", "learning rate must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(CoreError::invalid("sft config", "batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Knobs for [`spin_train`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpinConfig {
    pub iterations: usize,
    pub dpo_beta: f64,
    /// Full-batch DPO steps per iteration on the iteration's pair set.
    pub inner_steps: usize,
    pub learning_rate: f64,
    pub generations_per_demo: usize,
    pub seed: u64,
    /// Keep the original reference in the DPO loss instead of the self-play
    /// convention (previous iteration's policy).
    pub fixed_reference: bool,
}

impl Default for SpinConfig {
    fn default() -> Self {
        SpinConfig {
            iterations: 2,
            dpo_beta: 0.1,
            inner_steps: 100,
            learning_rate: 0.5,
            generations_per_demo: 1,
            seed: 0,
            fixed_reference: false,
        }
    }
}

impl SpinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(CoreError::invalid("spin config", "iterations must be at least 1"));
        }
        if !(self.dpo_beta > 0.0) {
            return Err(CoreError::invalid("spin config", "dpo_beta must be positive"));
        }
        if self.generations_per_demo == 0 {
            return Err(CoreError::invalid(
                "spin config",
                "generations_per_demo must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Trainable per-prompt logits; `to_policy` applies a max-subtracted softmax
/// row by row.
struct LogitPolicy {
    prompts: std::sync::Arc<PromptSet>,
    vocab: u32,
    horizon: u32,
    m: usize,
    logits: Vec<f64>,
}

impl LogitPolicy {
    fn from_policy(policy: &SequencePolicy) -> Result<Self> {
        if policy.min_prob() <= 0.0 {
            return Err(CoreError::invalid(
                "logit policy",
                "initial policy has a zero probability; apply a floor first",
            ));
        }
        let m = policy.n_completions();
        let mut logits = Vec::with_capacity(policy.prompts().len() * m);
        for p in 0..policy.prompts().len() {
            logits.extend(policy.row(p).iter().map(|q| q.ln()));
        }
        Ok(LogitPolicy {
            prompts: policy.prompts().clone(),
            vocab: policy.vocab(),
            horizon: policy.horizon(),
            m,
            logits,
        })
    }

    fn row(&self, p: usize) -> &[f64] {
        &self.logits[p * self.m..(p + 1) * self.m]
    }

    /// Per-prompt softmax probabilities.
    fn probs_row(&self, p: usize) -> Vec<f64> {
        let row = self.row(p);
        let lse = log_sum_exp(row);
        row.iter().map(|l| (l - lse).exp()).collect()
    }

    fn log_probs_row(&self, p: usize) -> Vec<f64> {
        let row = self.row(p);
        let lse = log_sum_exp(row);
        row.iter().map(|l| l - lse).collect()
    }

    fn to_policy(&self) -> Result<SequencePolicy> {
        let rows = (0..self.prompts.len()).map(|p| self.probs_row(p)).collect();
        SequencePolicy::from_table(self.prompts.clone(), self.vocab, self.horizon, rows)
    }
}

/// Outcome of [`sft_train`].
#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub policy: SequencePolicy,
    /// Training loss once per epoch, before that epoch's update.
    pub loss_trace: Vec<f64>,
    /// Set when training stopped early on a non-finite loss.
    pub aborted: Option<String>,
}

/// Behavior cloning: gradient descent on `−E_D[ln π(y|x)]` over policy
/// logits.
///
/// With a tabular policy, full batches, and enough steps this converges to
/// the empirical distribution of `D`; the returned policy has the standard
/// probability floor applied so later log-ratio computations stay finite.
pub fn sft_train(
    init_policy: &SequencePolicy,
    demos: &DemonstrationDataset,
    config: &SftConfig,
) -> Result<SftOutcome> {
    config.validate()?;
    let mut logit = LogitPolicy::from_policy(init_policy)?;
    let m = logit.m;
    let full_batch = config.batch_size >= demos.len();
    let mut rng = seeding::rng(seeding::derive(config.seed, &[0x5f7]));
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut aborted = None;

    // Resolve demonstration indices once.
    let resolved: Vec<(usize, usize)> = demos
        .items()
        .iter()
        .map(|(x, y)| init_policy.resolve(x, y))
        .collect::<Result<_>>()?;

    for epoch in 0..config.epochs {
        // (index into demos, weight) pairs for this step.
        let batch: Vec<(usize, f64)> = if full_batch {
            (0..demos.len()).map(|i| (i, demos.weight(i))).collect()
        } else {
            let w = 1.0 / config.batch_size as f64;
            (0..config.batch_size)
                .map(|_| (weighted_draw(demos, &mut rng), w))
                .collect()
        };

        let log_rows: Vec<Vec<f64>> =
            (0..logit.prompts.len()).map(|p| logit.log_probs_row(p)).collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; logit.logits.len()];
        let mut prompt_weight = vec![0.0; logit.prompts.len()];
        for &(i, w) in &batch {
            let (p, j) = resolved[i];
            loss -= w * log_rows[p][j];
            grad[p * m + j] -= w;
            prompt_weight[p] += w;
        }
        if !loss.is_finite() {
            aborted = Some(format!("non-finite loss at epoch {epoch}"));
            break;
        }
        loss_trace.push(loss);
        for (p, &pw) in prompt_weight.iter().enumerate() {
            if pw == 0.0 {
                continue;
            }
            for (g, lq) in grad[p * m..(p + 1) * m].iter_mut().zip(&log_rows[p]) {
                *g += pw * lq.exp();
            }
        }
        for (l, g) in logit.logits.iter_mut().zip(&grad) {
            *l -= config.learning_rate * g;
        }
    }

    Ok(SftOutcome {
        policy: logit.to_policy()?.floored(REF_POLICY_FLOOR),
        loss_trace,
        aborted,
    })
}

fn weighted_draw(demos: &DemonstrationDataset, rng: &mut rand_chacha::ChaCha8Rng) -> usize {
    use rand::Rng;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for i in 0..demos.len() {
        acc += demos.weight(i);
        if u < acc {
            return i;
        }
    }
    demos.len() - 1
}

/// One SPIN iteration: pair demonstrations against the current policy's
/// generations, then run `inner_steps` of full-batch DPO with
/// `dpo_reference` as the frozen reference.
pub fn spin_iteration(
    policy: &SequencePolicy,
    dpo_reference: &SequencePolicy,
    demos: &DemonstrationDataset,
    config: &SpinConfig,
    seed: u64,
) -> Result<SequencePolicy> {
    Ok(spin_iteration_traced(policy, dpo_reference, demos, config, seed)?.0)
}

fn spin_iteration_traced(
    policy: &SequencePolicy,
    dpo_reference: &SequencePolicy,
    demos: &DemonstrationDataset,
    config: &SpinConfig,
    seed: u64,
) -> Result<(SequencePolicy, f64, f64)> {
    config.validate()?;
    let pairs = build_synthetic_preferences(
        demos,
        policy,
        config.generations_per_demo,
        PairSelection::All,
        None,
        seed,
    )?;
    let mut logit = LogitPolicy::from_policy(policy)?;
    let m = logit.m;
    let vocab = policy.vocab();

    // Resolve pair indices and the fixed reference log-ratios once.
    struct Pair {
        p: usize,
        jw: usize,
        jl: usize,
        ref_gap: f64,
    }
    let resolved: Vec<Pair> = pairs
        .items()
        .iter()
        .map(|item| {
            let p = dpo_reference.prompts().require(&item.prompt)?;
            let jw = crate::seqcore::completion_index(&item.chosen, vocab);
            let jl = crate::seqcore::completion_index(&item.rejected, vocab);
            let ref_gap = dpo_reference.prob_indexed(p, jw).ln() - dpo_reference.prob_indexed(p, jl).ln();
            Ok(Pair { p, jw, jl, ref_gap })
        })
        .collect::<Result<_>>()?;

    let loss_start = dpo_loss(&logit.to_policy()?, dpo_reference, &pairs, config.dpo_beta)?;
    let n = resolved.len() as f64;
    for _ in 0..config.inner_steps {
        let mut grad = vec![0.0; logit.logits.len()];
        let log_rows: Vec<Vec<f64>> = (0..logit.prompts.len()).map(|p| logit.log_probs_row(p)).collect();
        for pair in &resolved {
            let lp = &log_rows[pair.p];
            let z = config.dpo_beta * ((lp[pair.jw] - lp[pair.jl]) - pair.ref_gap);
            // ∂/∂logit of −ln σ(z): softmax terms cancel between chosen and
            // rejected, leaving ±β·σ(−z) on the two entries.
            let w = sigmoid(-z) * config.dpo_beta / n;
            grad[pair.p * m + pair.jw] -= w;
            grad[pair.p * m + pair.jl] += w;
        }
        for (l, g) in logit.logits.iter_mut().zip(&grad) {
            *l -= config.learning_rate * g;
        }
    }
    let updated = logit.to_policy()?;
    let loss_end = dpo_loss(&updated, dpo_reference, &pairs, config.dpo_beta)?;
    Ok((updated, loss_start, loss_end))
}

/// Per-iteration SPIN diagnostics.
#[derive(Debug, Clone)]
pub struct SpinIterationMetrics {
    pub iteration: usize,
    pub dpo_loss_start: f64,
    pub dpo_loss_end: f64,
    /// Exact expected log-likelihood of fresh expert demonstrations, when the
    /// instance is known.
    pub heldout_demo_loglik: Option<f64>,
    /// Accuracy of the implicit reward `β·ln(π/π_init)` on the held-out
    /// preference set, when one is supplied.
    pub implicit_reward_accuracy: Option<f64>,
}

/// Outcome of [`spin_train`].
#[derive(Debug, Clone)]
pub struct SpinOutcome {
    pub policy: SequencePolicy,
    pub metrics: Vec<SpinIterationMetrics>,
    /// Policy after each iteration, for downstream evaluation.
    pub snapshots: Vec<SequencePolicy>,
}

/// Chain [`spin_iteration`] for `config.iterations` iterations.
///
/// The DPO reference follows the self-play convention (each iteration's
/// starting policy) unless `fixed_reference` keeps `init_policy` throughout.
/// Implicit-reward metrics always measure against `init_policy`.
pub fn spin_train(
    init_policy: &SequencePolicy,
    demos: &DemonstrationDataset,
    config: &SpinConfig,
    instance: Option<&Instance>,
    heldout_prefs: Option<&PreferenceDataset>,
) -> Result<SpinOutcome> {
    config.validate()?;
    let mut policy = init_policy.clone();
    let mut metrics = Vec::with_capacity(config.iterations);
    let mut snapshots = Vec::with_capacity(config.iterations);
    for k in 0..config.iterations {
        let reference = if config.fixed_reference {
            init_policy.clone()
        } else {
            policy.clone()
        };
        let seed = seeding::derive(config.seed, &[0x5917, k as u64]);
        let (updated, loss_start, loss_end) =
            spin_iteration_traced(&policy, &reference, demos, config, seed)?;
        policy = updated;

        let heldout_demo_loglik = instance.map(|inst| evalx::expected_expert_loglik(&policy, inst));
        let implicit_reward_accuracy = heldout_prefs
            .map(|prefs| {
                let implicit = crate::objectives::ImplicitReward {
                    policy: &policy,
                    reference: init_policy,
                    beta: config.dpo_beta,
                };
                evalx::reward_accuracy(&implicit, prefs)
            })
            .transpose()?;
        metrics.push(SpinIterationMetrics {
            iteration: k,
            dpo_loss_start: loss_start,
            dpo_loss_end: loss_end,
            heldout_demo_loglik,
            implicit_reward_accuracy,
        });
        snapshots.push(policy.clone());
    }
    Ok(SpinOutcome {
        policy,
        metrics,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::sft_loss as sft_loss_fn;
    use crate::seqcore::TokenSeq as TS;
    use crate::workbench::{make_instance, sample_demonstrations, InstanceSpec};
    use std::sync::Arc;

    fn tiny_instance(seed: u64) -> Instance {
        make_instance(&InstanceSpec {
            vocab: 2,
            horizon: 2,
            prompt_count: 2,
            prompt_length: 1,
            beta: 1.0,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn sft_full_population_recovers_expert_distribution() {
        let instance = tiny_instance(5);
        let demos = DemonstrationDataset::full_population(&instance);
        let config = SftConfig {
            epochs: 40_000,
            learning_rate: 2.0,
            batch_size: usize::MAX,
            seed: 0,
        };
        let out = sft_train(instance.pi_ref(), &demos, &config).unwrap();
        assert!(out.aborted.is_none());
        for p in 0..2 {
            let tv: f64 = (0..4)
                .map(|j| (out.policy.prob_indexed(p, j) - instance.pi_expert().prob_indexed(p, j)).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv <= 1e-6, "prompt {p}: tv {tv}");
        }
        // Loss decreased along the way.
        assert!(out.loss_trace.last().unwrap() < out.loss_trace.first().unwrap());
    }

    #[test]
    fn sft_zero_learning_rate_returns_init() {
        let instance = tiny_instance(6);
        let demos = sample_demonstrations(&instance, 20, 3).unwrap();
        let config = SftConfig {
            epochs: 50,
            learning_rate: 0.0,
            batch_size: usize::MAX,
            seed: 0,
        };
        let out = sft_train(instance.pi_ref(), &demos, &config).unwrap();
        for p in 0..2 {
            for j in 0..4 {
                // Identical up to the ln/softmax round trip.
                assert!(
                    (out.policy.prob_indexed(p, j) - instance.pi_ref().prob_indexed(p, j)).abs()
                        < 1e-15
                );
            }
        }
    }

    #[test]
    fn sft_single_demo_converges_toward_floored_point_mass() {
        let prompts = Arc::new(crate::seqcore::PromptSet::uniform(vec![TS::from(vec![0])]).unwrap());
        let init = SequencePolicy::uniform(prompts, 2, 2).unwrap();
        let demos =
            DemonstrationDataset::new(vec![(TS::from(vec![0]), TS::from(vec![1, 0]))]).unwrap();
        let config = SftConfig {
            epochs: 60_000,
            learning_rate: 1.5,
            batch_size: 8,
            seed: 1,
        };
        let out = sft_train(&init, &demos, &config).unwrap();
        assert!(out.policy.prob_indexed(0, 2) > 0.999);
        // The floor keeps every alternative strictly positive.
        assert!(out.policy.min_prob() >= REF_POLICY_FLOOR * 0.99);
    }

    #[test]
    fn spin_zero_inner_steps_is_identity() {
        let instance = tiny_instance(7);
        let demos = sample_demonstrations(&instance, 30, 4).unwrap();
        let config = SpinConfig {
            inner_steps: 0,
            ..Default::default()
        };
        let out = spin_iteration(instance.pi_ref(), instance.pi_ref(), &demos, &config, 9).unwrap();
        for p in 0..2 {
            for j in 0..4 {
                assert!((out.prob_indexed(p, j) - instance.pi_ref().prob_indexed(p, j)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn spin_first_iteration_starts_at_ln_two() {
        let instance = tiny_instance(8);
        let demos = sample_demonstrations(&instance, 40, 5).unwrap();
        let config = SpinConfig::default();
        let (_, loss_start, loss_end) = spin_iteration_traced(
            instance.pi_ref(),
            instance.pi_ref(),
            &demos,
            &config,
            11,
        )
        .unwrap();
        assert!((loss_start - 2f64.ln()).abs() < 1e-12);
        assert!(loss_end < loss_start);
    }

    #[test]
    fn spin_iteration_raises_demo_likelihood() {
        let instance = tiny_instance(9);
        let demos = sample_demonstrations(&instance, 60, 6).unwrap();
        let config = SpinConfig::default();
        let updated = spin_iteration(instance.pi_ref(), instance.pi_ref(), &demos, &config, 12).unwrap();
        let before = sft_loss_fn(instance.pi_ref(), &demos).unwrap();
        let after = sft_loss_fn(&updated, &demos).unwrap();
        // Lower SFT loss = higher mean demo log-probability.
        assert!(after < before, "{after} vs {before}");
    }

    #[test]
    fn spin_train_single_iteration_matches_spin_iteration() {
        let instance = tiny_instance(10);
        let demos = sample_demonstrations(&instance, 30, 7).unwrap();
        let config = SpinConfig {
            iterations: 1,
            ..Default::default()
        };
        let trained = spin_train(instance.pi_ref(), &demos, &config, None, None).unwrap();
        let direct = spin_iteration(
            instance.pi_ref(),
            instance.pi_ref(),
            &demos,
            &config,
            seeding::derive(config.seed, &[0x5917, 0]),
        )
        .unwrap();
        for p in 0..2 {
            for j in 0..4 {
                assert_eq!(
                    trained.policy.prob_indexed(p, j).to_bits(),
                    direct.prob_indexed(p, j).to_bits()
                );
            }
        }
    }

    #[test]
    fn spin_train_is_deterministic() {
        let instance = tiny_instance(11);
        let demos = sample_demonstrations(&instance, 50, 8).unwrap();
        let config = SpinConfig::default();
        let a = spin_train(instance.pi_ref(), &demos, &config, Some(&instance), None).unwrap();
        let b = spin_train(instance.pi_ref(), &demos, &config, Some(&instance), None).unwrap();
        assert_eq!(a.metrics.len(), b.metrics.len());
        for (ma, mb) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(ma.dpo_loss_end.to_bits(), mb.dpo_loss_end.to_bits());
            assert_eq!(
                ma.heldout_demo_loglik.unwrap().to_bits(),
                mb.heldout_demo_loglik.unwrap().to_bits()
            );
        }
    }

    #[test]
    fn spin_implicit_reward_separates_demos_from_reference_samples() {
        let instance = tiny_instance(12);
        let demos = sample_demonstrations(&instance, 150, 9).unwrap();
        let config = SpinConfig::default();
        let out = spin_train(instance.pi_ref(), &demos, &config, None, None).unwrap();

        // Chosen = fresh expert demos, rejected = fresh reference samples.
        let fresh = sample_demonstrations(&instance, 400, 1009).unwrap();
        let mut items = Vec::new();
        for (i, (x, y)) in fresh.items().iter().enumerate() {
            let r = instance
                .pi_ref()
                .sample(x, 1, seeding::derive(77, &[i as u64]))
                .unwrap()
                .remove(0);
            if r != *y {
                items.push(crate::objectives::PreferenceItem {
                    prompt: x.clone(),
                    chosen: y.clone(),
                    rejected: r,
                });
            }
        }
        let prefs = PreferenceDataset::new(items).unwrap();
        let implicit = crate::objectives::ImplicitReward {
            policy: &out.policy,
            reference: instance.pi_ref(),
            beta: config.dpo_beta,
        };
        let acc = evalx::reward_accuracy(&implicit, &prefs).unwrap();
        assert!(acc > 0.5, "accuracy {acc}");
    }
}
