//! Runtime verification suites behind the CLI's `verify` subcommand: the
//! gradient check, the closed-form-policy identities, and the concentration
//! experiment, each against seeded random instances.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diagnostics::{gradient_check, FD_STEP};
use crate::evalx::concentration_experiment;
use crate::objectives::{
    bi_level_surrogate, btl_loss, dpo_loss, optimal_policy, single_level_surrogate,
    DemonstrationDataset, ImplicitReward, PreferenceDataset, PreferenceItem,
};
use crate::seqcore::{completion_from_index, RewardModel, SequenceScorer};
use crate::workbench::{make_instance, sample_demonstrations, InstanceSpec};
use crate::{seeding, Result};

/// One named pass/fail check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckOutcome {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

fn random_tabular_reward(instance: &crate::seqcore::Instance, seed: u64) -> Result<RewardModel> {
    let mut reward = RewardModel::tabular(
        instance.prompt_set().clone(),
        instance.vocab(),
        instance.horizon(),
        instance.c_r(),
    )?;
    let mut rng = seeding::rng(seed);
    for p in reward.params_mut() {
        *p = rng.sample::<f64, _>(StandardNormal);
    }
    Ok(reward)
}

/// Analytic surrogate gradient vs central finite differences on ten seeded
/// tabular instances (V=3, H=3, 3 prompts); passes at relative error 1e-6.
pub fn verify_gradient(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut worst: f64 = 0.0;
    for trial in 0..10u64 {
        let instance = make_instance(&InstanceSpec {
            vocab: 3,
            horizon: 3,
            prompt_count: 3,
            prompt_length: 2,
            beta: 1.0,
            seed: seeding::derive(seed, &[0x60ad, trial]),
            ..Default::default()
        })?;
        let demos = sample_demonstrations(&instance, 24, seeding::derive(seed, &[0xd0, trial]))?;
        let reward = random_tabular_reward(&instance, seeding::derive(seed, &[0x0e, trial]))?;
        let check = gradient_check(
            &reward,
            &demos,
            instance.pi_ref(),
            instance.prompt_set(),
            1.0,
            FD_STEP,
        )?;
        worst = worst.max(check.relative_error);
    }
    Ok(vec![CheckOutcome::new(
        "gradient-vs-finite-differences",
        worst <= 1e-6,
        format!("max relative error {worst:.3e} over 10 seeds (tolerance 1e-6)"),
    )])
}

/// Closed-form-policy, dual-path, and implicit-reward identities.
pub fn verify_identities(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut outcomes = Vec::new();

    // Normalization and Gibbs residuals over 100 seeded (reward, π_ref, β)
    // triples, with β spanning {0.1, 1, 10}.
    let betas = [0.1, 1.0, 10.0];
    let mut worst_norm: f64 = 0.0;
    let mut worst_gibbs: f64 = 0.0;
    for trial in 0..100u64 {
        let instance = make_instance(&InstanceSpec {
            vocab: 3,
            horizon: 2,
            prompt_count: 2,
            prompt_length: 2,
            seed: seeding::derive(seed, &[0x91b5, trial]),
            ..Default::default()
        })?;
        let reward = random_tabular_reward(&instance, seeding::derive(seed, &[0x77, trial]))?;
        let beta = betas[(trial % 3) as usize];
        let star = optimal_policy(&reward, instance.pi_ref(), beta)?;
        for p in 0..instance.prompt_set().len() {
            let row = star.row(p);
            worst_norm = worst_norm.max((row.iter().sum::<f64>() - 1.0).abs());
            let residuals: Vec<f64> = (0..instance.n_completions())
                .map(|j| {
                    row[j].ln() - instance.pi_ref().prob_indexed(p, j).ln()
                        - reward.score_indexed(p, j) / beta
                })
                .collect();
            let spread = residuals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - residuals.iter().cloned().fold(f64::INFINITY, f64::min);
            worst_gibbs = worst_gibbs.max(spread);
        }
    }
    outcomes.push(CheckOutcome::new(
        "closed-form-policy-normalization",
        worst_norm <= 1e-10,
        format!("max |Σπ − 1| = {worst_norm:.3e} over 100 triples (tolerance 1e-10)"),
    ));
    outcomes.push(CheckOutcome::new(
        "closed-form-policy-gibbs-identity",
        worst_gibbs <= 1e-10,
        format!("max residual spread {worst_gibbs:.3e} over 100 triples (tolerance 1e-10)"),
    ));

    // Single-level vs bi-level surrogate agreement over 100 seeded rewards.
    let instance = make_instance(&InstanceSpec {
        vocab: 3,
        horizon: 2,
        prompt_count: 3,
        prompt_length: 2,
        seed: seeding::derive(seed, &[0xd0a1]),
        ..Default::default()
    })?;
    let demos = sample_demonstrations(&instance, 32, seeding::derive(seed, &[0xa11]))?;
    let mut worst_dual: f64 = 0.0;
    for trial in 0..100u64 {
        let reward = random_tabular_reward(&instance, seeding::derive(seed, &[0x2b, trial]))?;
        let beta = betas[(trial % 3) as usize];
        let a = single_level_surrogate(&reward, &demos, instance.pi_ref(), instance.prompt_set(), beta)?;
        let b = bi_level_surrogate(&reward, &demos, instance.pi_ref(), instance.prompt_set(), beta)?;
        worst_dual = worst_dual.max((a - b).abs());
    }
    outcomes.push(CheckOutcome::new(
        "surrogate-dual-path",
        worst_dual <= 1e-10,
        format!("max |single − bilevel| = {worst_dual:.3e} over 100 rewards (tolerance 1e-10)"),
    ));

    // DPO loss equals the Bradley-Terry loss of the implicit reward on 1000
    // seeded items.
    let mut worst_dpo: f64 = 0.0;
    let m = instance.n_completions();
    let mut rng = seeding::rng(seeding::derive(seed, &[0xd90]));
    let policy = optimal_policy(
        &random_tabular_reward(&instance, seeding::derive(seed, &[0x90d]))?,
        instance.pi_ref(),
        1.0,
    )?;
    let mut items = Vec::with_capacity(1000);
    while items.len() < 1000 {
        let p = rng.random_range(0..instance.prompt_set().len());
        let a = rng.random_range(0..m);
        let b = rng.random_range(0..m);
        if a == b {
            continue;
        }
        items.push(PreferenceItem {
            prompt: instance.prompt_set().prompt(p).clone(),
            chosen: completion_from_index(a, instance.vocab(), instance.horizon()),
            rejected: completion_from_index(b, instance.vocab(), instance.horizon()),
        });
    }
    let prefs = PreferenceDataset::new(items)?;
    for &beta in &betas {
        let d = dpo_loss(&policy, instance.pi_ref(), &prefs, beta)?;
        let implicit = ImplicitReward {
            policy: &policy,
            reference: instance.pi_ref(),
            beta,
        };
        let b = btl_loss(&implicit, &prefs)?;
        worst_dpo = worst_dpo.max((d - b).abs());
    }
    outcomes.push(CheckOutcome::new(
        "dpo-btl-implicit-reward-identity",
        worst_dpo <= 1e-12,
        format!("max |dpo − btl| = {worst_dpo:.3e} over 1000 items (tolerance 1e-12)"),
    ));

    // The population likelihood coincides with the full-population surrogate.
    let full = DemonstrationDataset::full_population(&instance);
    let mut worst_pop: f64 = 0.0;
    for trial in 0..20u64 {
        let reward = random_tabular_reward(&instance, seeding::derive(seed, &[0x99, trial]))?;
        let l = crate::objectives::exact_likelihood(&reward, &instance)?;
        let s = single_level_surrogate(&reward, &full, instance.pi_ref(), instance.prompt_set(), 1.0)?;
        worst_pop = worst_pop.max((l - s).abs());
    }
    outcomes.push(CheckOutcome::new(
        "likelihood-equals-population-surrogate",
        worst_pop <= 1e-12,
        format!("max gap {worst_pop:.3e} over 20 rewards (tolerance 1e-12)"),
    ));

    Ok(outcomes)
}

/// Concentration experiment: fitted log-log slope of the median gap and the
/// Hoeffding-style bound at every size.
pub fn verify_concentration(seed: u64) -> Result<Vec<CheckOutcome>> {
    let instance = make_instance(&InstanceSpec {
        vocab: 3,
        horizon: 3,
        prompt_count: 3,
        prompt_length: 2,
        beta: 1.0,
        seed: seeding::derive(seed, &[0xc0ce]),
        ..Default::default()
    })?;
    let sizes = [16, 64, 256, 1024, 4096];
    let report = concentration_experiment(&instance, 5, &sizes, 50, seeding::derive(seed, &[0xee]))?;
    let slope_ok = report.slope >= -0.65 && report.slope <= -0.35;
    let bound_ok = report
        .p90_gap
        .iter()
        .zip(&report.bound)
        .all(|(gap, bound)| gap <= bound);
    Ok(vec![
        CheckOutcome::new(
            "concentration-slope",
            slope_ok,
            format!("fitted slope {:.4} (expected in [-0.65, -0.35])", report.slope),
        ),
        CheckOutcome::new(
            "concentration-bound",
            bound_ok,
            format!(
                "90th-percentile gaps {:?} under bounds {:?}",
                report.p90_gap, report.bound
            ),
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_checks_pass() {
        for outcome in verify_identities(1234).unwrap() {
            assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
    }

    #[test]
    fn gradient_checks_pass() {
        for outcome in verify_gradient(99).unwrap() {
            assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
    }
}
