//! Numerical cross-checks: central finite differences against the analytic
//! surrogate gradient.
//!
//! The finite-difference path only ever evaluates the scalar objective at
//! perturbed parameters, so it stays independent of the analytic gradient it
//! is checking.

use crate::objectives::{single_level_surrogate, surrogate_gradient, DemonstrationDataset};
use crate::seqcore::{PromptSet, RewardModel, SequencePolicy};
use crate::Result;

/// Central-difference step on raw reward parameters; balances truncation
/// against round-off at double precision.
pub const FD_STEP: f64 = 1e-5;

/// Central finite differences of `eval` with respect to every reward
/// parameter.
pub fn finite_difference_gradient<F>(
    reward: &RewardModel,
    step: f64,
    mut eval: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&RewardModel) -> Result<f64>,
{
    let mut grad = Vec::with_capacity(reward.n_params());
    let mut probe = reward.clone();
    for i in 0..reward.n_params() {
        let orig = reward.params()[i];
        probe.params_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.params_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.params_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradientCheck {
    /// `‖analytic − fd‖∞ / (1 + ‖analytic‖∞)`.
    pub relative_error: f64,
    pub max_abs_gradient: f64,
}

/// Compare the analytic surrogate gradient against central finite differences
/// of the single-level surrogate value.
pub fn gradient_check(
    reward: &RewardModel,
    demos: &DemonstrationDataset,
    pi_ref: &SequencePolicy,
    prompts: &PromptSet,
    beta: f64,
    step: f64,
) -> Result<GradientCheck> {
    let analytic = surrogate_gradient(reward, demos, pi_ref, prompts, beta)?;
    let fd = finite_difference_gradient(reward, step, |r| {
        single_level_surrogate(r, demos, pi_ref, prompts, beta)
    })?;
    let max_abs = analytic.iter().cloned().fold(0.0f64, |a, g| a.max(g.abs()));
    let max_err = analytic
        .iter()
        .zip(&fd)
        .map(|(a, f)| (a - f).abs())
        .fold(0.0f64, f64::max);
    Ok(GradientCheck {
        relative_error: max_err / (1.0 + max_abs),
        max_abs_gradient: max_abs,
    })
}
