//! Desk-scale evaluation protocol: reward accuracy on a judge-labeled
//! held-out preference set, ground-truth reward score, head-to-head win
//! rate, KL to the expert, and the empirical concentration experiment for
//! the likelihood-vs-surrogate gap.
//!
//! The synthetic instance's true reward `r*` plays the role of the external
//! judge: it labels held-out preference pairs and decides match winners.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::objectives::{exact_likelihood, single_level_surrogate, PreferenceDataset, PreferenceItem};
use crate::seqcore::{
    completion_from_index, Instance, PromptSet, RewardModel, SequencePolicy, SequenceScorer,
};
use crate::workbench::sample_demonstrations;
use crate::{par, seeding, CoreError, Result};

/// Fraction of held-out items where the scorer ranks the judge's chosen
/// completion above the rejected one; exact ties count one half.
pub fn reward_accuracy<S: SequenceScorer>(scorer: &S, heldout: &PreferenceDataset) -> Result<f64> {
    let mut wins = 0.0;
    for item in heldout.items() {
        let c = scorer.score_seq(&item.prompt, &item.chosen)?;
        let r = scorer.score_seq(&item.prompt, &item.rejected)?;
        if c > r {
            wins += 1.0;
        } else if c == r {
            wins += 0.5;
        }
    }
    Ok(wins / heldout.len() as f64)
}

/// Exact expected ground-truth score `E_{x∼μ} Σ_y π(y|x)·r*(x, y)`.
pub fn ground_truth_score_exact(
    policy: &SequencePolicy,
    r_star: &RewardModel,
    prompts: &PromptSet,
) -> Result<f64> {
    if !policy.prompts().same_as(prompts) || !r_star.prompts().same_as(prompts) {
        return Err(CoreError::PromptSetMismatch);
    }
    let mut total = 0.0;
    for p in 0..prompts.len() {
        let inner: f64 = policy
            .row(p)
            .iter()
            .enumerate()
            .map(|(j, q)| q * r_star.score_indexed(p, j))
            .sum();
        total += prompts.weight(p) * inner;
    }
    Ok(total)
}

/// Monte Carlo ground-truth score: mean `r*` over `n_samples` draws per
/// prompt, averaged with the prompt weights.
pub fn ground_truth_score_sampled(
    policy: &SequencePolicy,
    r_star: &RewardModel,
    prompts: &PromptSet,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(CoreError::EmptySampleRequest);
    }
    if !policy.prompts().same_as(prompts) || !r_star.prompts().same_as(prompts) {
        return Err(CoreError::PromptSetMismatch);
    }
    let means = par::map_range(prompts.len(), |p| {
        let mut rng = seeding::rng(seeding::derive(seed, &[0x975c, p as u64]));
        let draws = policy.sample_indices(p, n_samples, &mut rng);
        draws.iter().map(|&j| r_star.score_indexed(p, j)).sum::<f64>() / n_samples as f64
    });
    Ok(means
        .iter()
        .zip(prompts.weights())
        .map(|(m, w)| w * m)
        .sum())
}

fn draw_prompt(prompts: &PromptSet, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in prompts.weights().iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    prompts.len() - 1
}

/// Play `n_matches` seeded matches between two policies; each match samples a
/// prompt by weight, one completion per policy, and scores a win for the
/// higher `r*` (half for exact ties). Returns `(rate_a, rate_b)`, scored on
/// the same transcripts with roles swapped, so the two rates sum to 1
/// exactly.
pub fn win_rate_paired(
    policy_a: &SequencePolicy,
    policy_b: &SequencePolicy,
    r_star: &RewardModel,
    prompts: &PromptSet,
    n_matches: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_matches == 0 {
        return Err(CoreError::EmptySampleRequest);
    }
    if !policy_a.prompts().same_as(prompts) || !policy_b.prompts().same_as(prompts) {
        return Err(CoreError::PromptSetMismatch);
    }
    let scores = par::map_range(n_matches, |i| {
        let mut rng = seeding::rng(seeding::derive(seed, &[0x3a7c, i as u64]));
        let p = draw_prompt(prompts, &mut rng);
        let ya = policy_a.sample_indices(p, 1, &mut rng)[0];
        let yb = policy_b.sample_indices(p, 1, &mut rng)[0];
        let ra = r_star.score_indexed(p, ya);
        let rb = r_star.score_indexed(p, yb);
        if ra > rb {
            1.0
        } else if ra == rb {
            0.5
        } else {
            0.0
        }
    });
    let wins_a: f64 = scores.iter().sum();
    let rate_a = wins_a / n_matches as f64;
    Ok((rate_a, 1.0 - rate_a))
}

/// Win rate of `policy_a` over `policy_b` under the ground-truth judge.
pub fn win_rate(
    policy_a: &SequencePolicy,
    policy_b: &SequencePolicy,
    r_star: &RewardModel,
    prompts: &PromptSet,
    n_matches: usize,
    seed: u64,
) -> Result<f64> {
    Ok(win_rate_paired(policy_a, policy_b, r_star, prompts, n_matches, seed)?.0)
}

/// `E_{x∼μ}[KL(π_expert(·|x) ‖ π(·|x))]` by exact enumeration.
///
/// Errors when the policy assigns zero probability to an expert-supported
/// completion.
pub fn kl_to_expert(policy: &SequencePolicy, instance: &Instance) -> Result<f64> {
    let rows = instance.pi_expert().kl_rows(policy)?;
    Ok(rows
        .iter()
        .zip(instance.prompt_set().weights())
        .map(|(kl, w)| w * kl)
        .sum())
}

/// Exact expected log-likelihood of fresh expert demonstrations,
/// `E_{x∼μ, y∼π_expert}[ln π(y|x)]`; the infinite-held-out-set limit.
/// `-inf` when the policy misses expert support.
pub fn expected_expert_loglik(policy: &SequencePolicy, instance: &Instance) -> f64 {
    let expert = instance.pi_expert();
    let prompts = instance.prompt_set();
    let mut total = 0.0;
    for p in 0..prompts.len() {
        let mut inner = 0.0;
        for j in 0..instance.n_completions() {
            let w = expert.prob_indexed(p, j);
            if w == 0.0 {
                continue;
            }
            inner += w * policy.prob_indexed(p, j).ln();
        }
        total += prompts.weight(p) * inner;
    }
    total
}

/// Held-out preference pairs labeled by the ground-truth judge.
///
/// Each pair samples two completions from a 50/50 mixture of the reference
/// and expert policies, discards identical draws and exact `r*` ties, and
/// labels the higher-scoring completion as chosen.
pub fn judge_heldout_preferences(
    instance: &Instance,
    n_pairs: usize,
    seed: u64,
) -> Result<PreferenceDataset> {
    if n_pairs == 0 {
        return Err(CoreError::EmptySampleRequest);
    }
    let prompts = instance.prompt_set();
    let r_star = instance.r_star();
    let items = par::map_range(n_pairs, |i| {
        let mut rng = seeding::rng(seeding::derive(seed, &[0x1d9e, i as u64]));
        for _attempt in 0..1000 {
            let p = draw_prompt(prompts, &mut rng);
            let draw = |rng: &mut ChaCha8Rng| {
                let from_expert: bool = rng.random::<f64>() < 0.5;
                let policy = if from_expert {
                    instance.pi_expert()
                } else {
                    instance.pi_ref()
                };
                policy.sample_indices(p, 1, rng)[0]
            };
            let j1 = draw(&mut rng);
            let j2 = draw(&mut rng);
            if j1 == j2 {
                continue;
            }
            let (r1, r2) = (r_star.score_indexed(p, j1), r_star.score_indexed(p, j2));
            if r1 == r2 {
                continue;
            }
            let (jw, jl) = if r1 > r2 { (j1, j2) } else { (j2, j1) };
            return Some(PreferenceItem {
                prompt: prompts.prompt(p).clone(),
                chosen: completion_from_index(jw, instance.vocab(), instance.horizon()),
                rejected: completion_from_index(jl, instance.vocab(), instance.horizon()),
            });
        }
        None
    });
    let items: Vec<PreferenceItem> = items.into_iter().flatten().collect();
    if items.is_empty() {
        return Err(CoreError::invalid(
            "judge preferences",
            "could not draw any distinct, untied pair",
        ));
    }
    PreferenceDataset::new(items)
}

/// Hoeffding-style bound on the likelihood-vs-surrogate gap:
/// `(C_r − C_p)·√(ln(2/δ) / (2n))`.
pub fn hoeffding_gap_bound(c_r: f64, c_p: f64, delta: f64, n: usize) -> f64 {
    (c_r - c_p) * ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt()
}

/// Failure probability used for the reported bound values.
pub const CONCENTRATION_DELTA: f64 = 0.05;

/// Aggregated results of [`concentration_experiment`].
#[derive(Debug, Clone)]
pub struct ConcentrationReport {
    pub sizes: Vec<usize>,
    pub trials_per_size: usize,
    pub theta_samples: usize,
    /// Median of `|L − L̂|` per size, pooled over rewards and trials.
    pub median_gap: Vec<f64>,
    /// 90th percentile (nearest rank) of the gap per size.
    pub p90_gap: Vec<f64>,
    /// Least-squares slope and intercept of `ln median` against `ln n`.
    pub slope: f64,
    pub intercept: f64,
    /// Theoretical bound per size at `delta`.
    pub bound: Vec<f64>,
    pub delta: f64,
}

/// Measure how fast the finite-sample surrogate concentrates around the
/// population likelihood.
///
/// For each of `theta_samples` random tabular rewards and each dataset size,
/// draws `trials` demonstration sets from the expert and records
/// `|L(θ) − L̂(θ; D)|`. Requires a unit KL coefficient, where the population
/// likelihood and the surrogate differ only in the demonstration average and
/// the Hoeffding bound applies verbatim.
pub fn concentration_experiment(
    instance: &Instance,
    theta_samples: usize,
    sizes: &[usize],
    trials: usize,
    seed: u64,
) -> Result<ConcentrationReport> {
    if (instance.beta() - 1.0).abs() > 1e-12 {
        return Err(CoreError::invalid(
            "concentration experiment",
            format!("requires an instance with beta = 1, got {}", instance.beta()),
        ));
    }
    if theta_samples == 0 || trials == 0 || sizes.is_empty() {
        return Err(CoreError::invalid("concentration experiment", "empty grid"));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] == 0 {
        return Err(CoreError::invalid(
            "concentration experiment",
            "sizes must be positive and strictly increasing",
        ));
    }

    let thetas: Vec<RewardModel> = (0..theta_samples)
        .map(|t| {
            let mut reward = RewardModel::tabular(
                instance.prompt_set().clone(),
                instance.vocab(),
                instance.horizon(),
                instance.c_r(),
            )?;
            let mut rng = seeding::rng(seeding::derive(seed, &[0x7e7a, t as u64]));
            for p in reward.params_mut() {
                *p = rng.sample::<f64, _>(StandardNormal);
            }
            Ok(reward)
        })
        .collect::<Result<_>>()?;
    let likelihoods: Vec<f64> = thetas
        .iter()
        .map(|theta| exact_likelihood(theta, instance))
        .collect::<Result<_>>()?;

    let n_sizes = sizes.len();
    let jobs = theta_samples * n_sizes * trials;
    let gaps = par::map_range(jobs, |job| -> Result<f64> {
        let t = job / (n_sizes * trials);
        let s = (job / trials) % n_sizes;
        let r = job % trials;
        let demos = sample_demonstrations(
            instance,
            sizes[s],
            seeding::derive(seed, &[0xd047, t as u64, s as u64, r as u64]),
        )?;
        let surrogate = single_level_surrogate(
            &thetas[t],
            &demos,
            instance.pi_ref(),
            instance.prompt_set(),
            instance.beta(),
        )?;
        Ok((likelihoods[t] - surrogate).abs())
    });
    let gaps: Vec<f64> = gaps.into_iter().collect::<Result<_>>()?;

    let mut median_gap = Vec::with_capacity(n_sizes);
    let mut p90_gap = Vec::with_capacity(n_sizes);
    for s in 0..n_sizes {
        let mut pooled = Vec::with_capacity(theta_samples * trials);
        for t in 0..theta_samples {
            for r in 0..trials {
                pooled.push(gaps[t * n_sizes * trials + s * trials + r]);
            }
        }
        pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
        median_gap.push(median_sorted(&pooled));
        p90_gap.push(percentile_nearest_rank(&pooled, 0.90));
    }

    let (slope, intercept) = log_log_fit(sizes, &median_gap);
    let bound = sizes
        .iter()
        .map(|&n| hoeffding_gap_bound(instance.c_r(), instance.c_p(), CONCENTRATION_DELTA, n))
        .collect();

    Ok(ConcentrationReport {
        sizes: sizes.to_vec(),
        trials_per_size: trials,
        theta_samples,
        median_gap,
        p90_gap,
        slope,
        intercept,
        bound,
        delta: CONCENTRATION_DELTA,
    })
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn percentile_nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

fn log_log_fit(sizes: &[usize], values: &[f64]) -> (f64, f64) {
    let n = sizes.len() as f64;
    let xs: Vec<f64> = sizes.iter().map(|&s| (s as f64).ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let mean_x: f64 = xs.iter().sum::<f64>() / n;
    let mean_y: f64 = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mean_x) * (y - mean_y)).sum();
    let var: f64 = xs.iter().map(|x| (x - mean_x) * (x - mean_x)).sum();
    let slope = cov / var;
    (slope, mean_y - slope * mean_x)
}

/// One evaluation panel for a trained policy (and optionally its reward).
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub reward_accuracy: f64,
    pub ground_truth_score: f64,
    /// Win rate against the instance's reference policy.
    pub win_rate: f64,
    pub kl_to_expert: f64,
    pub heldout_demo_loglik: f64,
}

/// Settings for [`evaluate_policy`].
#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub win_rate_matches: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            win_rate_matches: 2000,
            seed: 0,
        }
    }
}

/// Assemble the full evaluation panel.
///
/// The scorer is the method's reward model when it has one, or its implicit
/// reward otherwise. A policy that misses expert support reports an infinite
/// KL rather than an error.
pub fn evaluate_policy<S: SequenceScorer>(
    policy: &SequencePolicy,
    scorer: &S,
    instance: &Instance,
    heldout: &PreferenceDataset,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let accuracy = reward_accuracy(scorer, heldout)?;
    let gt = ground_truth_score_exact(policy, instance.r_star(), instance.prompt_set())?;
    let wr = win_rate(
        policy,
        instance.pi_ref(),
        instance.r_star(),
        instance.prompt_set(),
        settings.win_rate_matches,
        seeding::derive(settings.seed, &[0x317a]),
    )?;
    let kl = match kl_to_expert(policy, instance) {
        Ok(v) => v,
        Err(CoreError::KlUndefined) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        reward_accuracy: accuracy,
        ground_truth_score: gt,
        win_rate: wr,
        kl_to_expert: kl,
        heldout_demo_loglik: expected_expert_loglik(policy, instance),
    })
}
