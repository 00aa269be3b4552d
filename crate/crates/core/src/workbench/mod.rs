//! Instance generation, dataset persistence, experiment configuration,
//! metrics export, and verification runners.

mod experiment;
mod io;
mod verify;

pub use experiment::{
    default_config, metrics_to_csv, run_experiment, run_single_method, EvalConfig,
    ExperimentConfig, Method, MethodArtifacts, MethodRun, MetricsRow, RunSummary, METRICS_HEADER,
};
pub use io::{
    load_instance, load_policy, load_reward, read_demonstrations, read_preferences,
    save_instance, save_policy, save_reward, write_demonstrations, write_preferences,
};
pub use verify::{verify_concentration, verify_gradient, verify_identities, CheckOutcome};

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::objectives::{optimal_policy, DemonstrationDataset};
use crate::seqcore::{
    completion_from_index, completion_space, Instance, PromptSet, RewardModel, SequencePolicy,
    TokenSeq, ENUMERATION_CAP,
};
use crate::{seeding, CoreError, Result};

/// Feature dimension used for randomly generated linear ground-truth rewards.
pub const LINEAR_FEATURE_DIM: usize = 32;

/// Ground-truth reward parameterization for generated instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSpecKind {
    TabularRandom,
    LinearRandom,
}

/// Recipe for a synthetic alignment world; everything downstream is a pure
/// function of these fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceSpec {
    pub vocab: u32,
    pub horizon: u32,
    pub prompt_count: usize,
    pub prompt_length: usize,
    pub r_star_kind: RewardSpecKind,
    /// Scale of the raw ground-truth reward parameters.
    pub r_star_scale: f64,
    /// KL coefficient of the expert's construction.
    pub beta: f64,
    pub c_r: f64,
    /// Probability floor for the reference policy.
    pub ref_floor: f64,
    pub seed: u64,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        InstanceSpec {
            vocab: 4,
            horizon: 3,
            prompt_count: 4,
            prompt_length: 3,
            r_star_kind: RewardSpecKind::TabularRandom,
            r_star_scale: 1.0,
            beta: 1.0,
            c_r: 5.0,
            ref_floor: 1e-6,
            seed: 20240817,
        }
    }
}

impl InstanceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(CoreError::invalid("instance spec", "vocab must be at least 2"));
        }
        if self.horizon == 0 {
            return Err(CoreError::invalid("instance spec", "horizon must be at least 1"));
        }
        if self.prompt_count == 0 || self.prompt_length == 0 {
            return Err(CoreError::invalid(
                "instance spec",
                "prompt_count and prompt_length must be at least 1",
            ));
        }
        let m = completion_space(self.vocab, self.horizon, ENUMERATION_CAP)?;
        if !(self.ref_floor > 0.0 && self.ref_floor < 1.0 / m as f64) {
            return Err(CoreError::invalid(
                "instance spec",
                format!("ref_floor must lie in (0, 1/{m})"),
            ));
        }
        if !(self.c_r > 0.0) {
            return Err(CoreError::invalid("instance spec", "c_r must be positive"));
        }
        if !(self.beta > 0.0) {
            return Err(CoreError::invalid("instance spec", "beta must be positive"));
        }
        if !(self.r_star_scale >= 0.0) {
            return Err(CoreError::invalid("instance spec", "r_star_scale must be non-negative"));
        }
        let prompt_space = (self.vocab as u128).pow(self.prompt_length.min(32) as u32);
        if (self.prompt_count as u128) > prompt_space {
            return Err(CoreError::invalid(
                "instance spec",
                "prompt_count exceeds the number of distinct prompts",
            ));
        }
        Ok(())
    }
}

/// Build the synthetic world described by `spec`.
///
/// Prompts are distinct uniform random sequences; the reference policy is a
/// floored, renormalized Dirichlet-style random table; the ground-truth
/// reward has seeded random raw parameters; and the expert is the exact
/// closed-form optimum of the KL-regularized objective under that reward.
/// `C_p` is recorded as the realized `ln(min π_ref)`.
pub fn make_instance(spec: &InstanceSpec) -> Result<Instance> {
    spec.validate()?;
    let m = completion_space(spec.vocab, spec.horizon, ENUMERATION_CAP)?;

    // Distinct prompts, in order of first appearance.
    let mut rng = seeding::rng(seeding::derive(spec.seed, &[0x9095]));
    let mut prompts: Vec<TokenSeq> = Vec::with_capacity(spec.prompt_count);
    while prompts.len() < spec.prompt_count {
        let candidate = TokenSeq::new(
            (0..spec.prompt_length)
                .map(|_| rng.random_range(0..spec.vocab))
                .collect(),
        );
        if !prompts.contains(&candidate) {
            prompts.push(candidate);
        }
    }
    let prompt_set = Arc::new(PromptSet::uniform(prompts)?);

    // Dirichlet(1, …, 1) rows via normalized Exp(1) draws, then floor and
    // renormalize.
    let mut ref_rng = seeding::rng(seeding::derive(spec.seed, &[0x4ef]));
    let rows: Vec<Vec<f64>> = (0..prompt_set.len())
        .map(|_| {
            let mut row: Vec<f64> = (0..m)
                .map(|_| {
                    let u: f64 = ref_rng.random();
                    -(1.0 - u).ln()
                })
                .collect();
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|q| *q /= total);
            row
        })
        .collect();
    let pi_ref = SequencePolicy::from_table(prompt_set.clone(), spec.vocab, spec.horizon, rows)?
        .floored(spec.ref_floor);

    let mut reward_rng = seeding::rng(seeding::derive(spec.seed, &[0x757a]));
    let r_star = match spec.r_star_kind {
        RewardSpecKind::TabularRandom => {
            let params: Vec<f64> = (0..prompt_set.len() * m)
                .map(|_| reward_rng.sample::<f64, _>(StandardNormal) * spec.r_star_scale)
                .collect();
            RewardModel::tabular_with_params(
                prompt_set.clone(),
                spec.vocab,
                spec.horizon,
                spec.c_r,
                params,
            )?
        }
        RewardSpecKind::LinearRandom => {
            let params: Vec<f64> = (0..LINEAR_FEATURE_DIM)
                .map(|_| reward_rng.sample::<f64, _>(StandardNormal) * spec.r_star_scale)
                .collect();
            RewardModel::linear_with_params(
                prompt_set.clone(),
                spec.vocab,
                spec.horizon,
                spec.c_r,
                LINEAR_FEATURE_DIM,
                seeding::derive(spec.seed, &[0xfea7]),
                params,
            )?
        }
    };

    let pi_expert = optimal_policy(&r_star, &pi_ref, spec.beta)?;
    let c_p = pi_ref.min_prob().ln();
    Instance::new(
        spec.vocab,
        spec.horizon,
        prompt_set,
        r_star,
        pi_ref,
        pi_expert,
        spec.beta,
        c_p,
        spec.seed,
    )
}

/// Draw `n` (prompt, completion) pairs with prompts from `μ` and completions
/// from the expert policy.
pub fn sample_demonstrations(instance: &Instance, n: usize, seed: u64) -> Result<DemonstrationDataset> {
    if n == 0 {
        return Err(CoreError::EmptySampleRequest);
    }
    let prompts = instance.prompt_set();
    let expert = instance.pi_expert();
    let mut rng = seeding::rng(seeding::derive(seed, &[0xde30]));
    let weights = prompts.weights();
    let items: Vec<(TokenSeq, TokenSeq)> = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut p = prompts.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    p = i;
                    break;
                }
            }
            let j = expert.sample_indices(p, 1, &mut rng)[0];
            (
                prompts.prompt(p).clone(),
                completion_from_index(j, instance.vocab(), instance.horizon()),
            )
        })
        .collect();
    DemonstrationDataset::new(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcore::{RewardKind, SequenceScorer};

    #[test]
    fn make_instance_is_deterministic() {
        let spec = InstanceSpec::default();
        let a = make_instance(&spec).unwrap();
        let b = make_instance(&spec).unwrap();
        assert_eq!(a.c_p().to_bits(), b.c_p().to_bits());
        for p in 0..spec.prompt_count {
            assert_eq!(a.prompt_set().prompt(p), b.prompt_set().prompt(p));
            for j in 0..a.n_completions() {
                assert_eq!(
                    a.pi_expert().prob_indexed(p, j).to_bits(),
                    b.pi_expert().prob_indexed(p, j).to_bits()
                );
                assert_eq!(
                    a.pi_ref().prob_indexed(p, j).to_bits(),
                    b.pi_ref().prob_indexed(p, j).to_bits()
                );
            }
        }
    }

    #[test]
    fn expert_satisfies_gibbs_identity() {
        let inst = make_instance(&InstanceSpec::default()).unwrap();
        for p in 0..inst.prompt_set().len() {
            let residuals: Vec<f64> = (0..inst.n_completions())
                .map(|j| {
                    inst.pi_expert().prob_indexed(p, j).ln()
                        - inst.pi_ref().prob_indexed(p, j).ln()
                        - inst.r_star().score_indexed(p, j) / inst.beta()
                })
                .collect();
            let spread = residuals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - residuals.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(spread <= 1e-10, "prompt {p}: spread {spread}");
        }
    }

    #[test]
    fn zero_reward_scale_makes_expert_equal_reference() {
        let inst = make_instance(&InstanceSpec {
            r_star_scale: 0.0,
            ..Default::default()
        })
        .unwrap();
        for p in 0..inst.prompt_set().len() {
            for j in 0..inst.n_completions() {
                assert!(
                    (inst.pi_expert().prob_indexed(p, j) - inst.pi_ref().prob_indexed(p, j)).abs()
                        < 1e-12
                );
            }
        }
    }

    #[test]
    fn linear_instance_builds_and_validates() {
        let inst = make_instance(&InstanceSpec {
            r_star_kind: RewardSpecKind::LinearRandom,
            vocab: 3,
            horizon: 2,
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(inst.r_star().kind(), RewardKind::Linear { .. }));
    }

    #[test]
    fn reference_respects_floor_bound() {
        let inst = make_instance(&InstanceSpec::default()).unwrap();
        assert!(inst.pi_ref().min_prob().ln() >= inst.c_p());
        // Every log-probability is at least C_p, by exhaustive scan.
        for p in 0..inst.prompt_set().len() {
            for j in 0..inst.n_completions() {
                assert!(inst.pi_ref().prob_indexed(p, j).ln() >= inst.c_p());
            }
        }
    }

    #[test]
    fn demonstrations_are_seeded_and_nonempty_checked() {
        let inst = make_instance(&InstanceSpec::default()).unwrap();
        assert!(sample_demonstrations(&inst, 0, 1).is_err());
        let a = sample_demonstrations(&inst, 100, 42).unwrap();
        let b = sample_demonstrations(&inst, 100, 42).unwrap();
        assert_eq!(a.items(), b.items());
    }

    #[test]
    fn demonstration_frequencies_match_expert_chi_square() {
        // V=2, H=2 single joint distribution over (prompt, completion) cells;
        // a chi-square goodness-of-fit test must not reject at p = 0.01.
        let inst = make_instance(&InstanceSpec {
            vocab: 2,
            horizon: 2,
            prompt_count: 2,
            prompt_length: 1,
            beta: 1.0,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let n = 50_000;
        let demos = sample_demonstrations(&inst, n, 7).unwrap();
        let mut counts = [0usize; 8];
        for (x, y) in demos.items() {
            let p = inst.prompt_set().position(x).unwrap();
            counts[p * 4 + crate::seqcore::completion_index(y, 2)] += 1;
        }
        let mut chi2 = 0.0;
        for p in 0..2 {
            for j in 0..4 {
                let expected =
                    n as f64 * inst.prompt_set().weight(p) * inst.pi_expert().prob_indexed(p, j);
                let observed = counts[p * 4 + j] as f64;
                chi2 += (observed - expected).powi(2) / expected;
            }
        }
        // 7 degrees of freedom.
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let p_value = 1.0 - ChiSquared::new(7.0).unwrap().cdf(chi2);
        assert!(p_value > 0.01, "chi2 {chi2}, p {p_value}");
    }
}
