//! Config-driven experiment runs: train the requested methods on one shared
//! instance and demonstration set, evaluate every iteration, and export
//! metrics as CSV plus a human-readable summary.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{sft_train, spin_train, SftConfig, SpinConfig};
use crate::evalx::{evaluate_policy, judge_heldout_preferences, EvalReport, EvalSettings};
use crate::irl::{irl_align, IrlConfig};
use crate::objectives::{exact_likelihood, single_level_surrogate, DemonstrationDataset, ImplicitReward, PreferenceDataset};
use crate::seqcore::{Instance, RewardModel, SequencePolicy};
use crate::workbench::{make_instance, sample_demonstrations, InstanceSpec};
use crate::{seeding, CoreError, Result};

/// Trainable methods the runner knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sft,
    Spin,
    Irl,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::Spin => "spin",
            Method::Irl => "irl",
        }
    }
}

/// Evaluation knobs shared by every method.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Judge-labeled held-out preference pairs.
    pub heldout_pref_pairs: usize,
    pub heldout_seed: u64,
    pub win_rate_matches: usize,
    /// Record wall-clock times in the CSV. Off by default so the emitted
    /// metrics are a pure function of the config (zeros are written instead).
    pub record_timing: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            heldout_pref_pairs: 2000,
            heldout_seed: 7,
            win_rate_matches: 2000,
            record_timing: false,
        }
    }
}

/// One self-contained experiment: an instance recipe, a demonstration draw,
/// and per-method training configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub instance: InstanceSpec,
    pub demo_count: usize,
    pub demo_seed: u64,
    pub methods: Vec<Method>,
    pub sft: SftConfig,
    pub spin: SpinConfig,
    pub irl: IrlConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            instance: InstanceSpec::default(),
            demo_count: 200,
            demo_seed: 1,
            methods: vec![Method::Sft, Method::Spin, Method::Irl],
            sft: SftConfig::default(),
            spin: SpinConfig::default(),
            irl: IrlConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.instance.validate()?;
        if self.demo_count == 0 {
            return Err(CoreError::invalid("experiment config", "demo_count must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(CoreError::invalid("experiment config", "no methods requested"));
        }
        if self.eval.heldout_pref_pairs == 0 || self.eval.win_rate_matches == 0 {
            return Err(CoreError::invalid("experiment config", "evaluation sizes must be positive"));
        }
        self.sft.validate()?;
        self.spin.validate()?;
        self.irl.validate()
    }
}

/// The embedded defaults, printable via the CLI's `--dump-defaults`.
pub fn default_config() -> ExperimentConfig {
    ExperimentConfig::default()
}

/// Column order of `metrics.csv`.
pub const METRICS_HEADER: &str = "method,iteration,seed,surrogate,exact_likelihood,kl_to_expert,reward_accuracy,gt_score,win_rate_vs_ref,heldout_demo_loglik,wall_time_s";

/// One evaluated (method, iteration) point.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub method: &'static str,
    pub iteration: usize,
    pub seed: u64,
    pub surrogate: f64,
    pub exact_likelihood: f64,
    pub kl_to_expert: f64,
    pub reward_accuracy: f64,
    pub gt_score: f64,
    pub win_rate_vs_ref: f64,
    pub heldout_demo_loglik: f64,
    pub wall_time_s: f64,
}

impl MetricsRow {
    pub fn all_finite(&self) -> bool {
        [
            self.surrogate,
            self.exact_likelihood,
            self.kl_to_expert,
            self.reward_accuracy,
            self.gt_score,
            self.win_rate_vs_ref,
            self.heldout_demo_loglik,
            self.wall_time_s,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Serialize with 17 significant digits so doubles round-trip losslessly.
fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{x:.16e}")
    }
}

/// Render rows as the canonical CSV document.
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.iteration,
            r.seed,
            fmt_f64(r.surrogate),
            fmt_f64(r.exact_likelihood),
            fmt_f64(r.kl_to_expert),
            fmt_f64(r.reward_accuracy),
            fmt_f64(r.gt_score),
            fmt_f64(r.win_rate_vs_ref),
            fmt_f64(r.heldout_demo_loglik),
            fmt_f64(r.wall_time_s),
        ));
    }
    out
}

/// Final artifacts of one trained method.
#[derive(Debug, Clone)]
pub struct MethodArtifacts {
    pub policy: SequencePolicy,
    pub reward: Option<RewardModel>,
}

/// Rows plus artifacts from one method run.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub rows: Vec<MetricsRow>,
    pub artifacts: MethodArtifacts,
    /// Early-stop reason, if the trainer hit a non-finite loss.
    pub aborted: Option<String>,
}

struct EvalContext<'a> {
    instance: &'a Instance,
    demos: &'a DemonstrationDataset,
    heldout: &'a PreferenceDataset,
    eval: &'a EvalConfig,
}

impl EvalContext<'_> {
    /// Evaluate a policy scored by its implicit reward (for reward-free
    /// methods).
    fn implicit_row(
        &self,
        method: &'static str,
        iteration: usize,
        seed: u64,
        policy: &SequencePolicy,
        wall_time_s: f64,
    ) -> Result<MetricsRow> {
        let implicit = ImplicitReward {
            policy,
            reference: self.instance.pi_ref(),
            beta: self.instance.beta(),
        };
        let surrogate = single_level_surrogate(
            &implicit,
            self.demos,
            self.instance.pi_ref(),
            self.instance.prompt_set(),
            self.instance.beta(),
        )?;
        let likelihood = exact_likelihood(&implicit, self.instance)?;
        let report = self.report(policy, &implicit, method, iteration)?;
        Ok(self.row(method, iteration, seed, surrogate, likelihood, report, wall_time_s))
    }

    fn report<S: crate::seqcore::SequenceScorer>(
        &self,
        policy: &SequencePolicy,
        scorer: &S,
        method: &'static str,
        iteration: usize,
    ) -> Result<EvalReport> {
        let settings = EvalSettings {
            win_rate_matches: self.eval.win_rate_matches,
            seed: seeding::derive(
                self.eval.heldout_seed,
                &[method.len() as u64, method.as_bytes()[0] as u64, iteration as u64],
            ),
        };
        evaluate_policy(policy, scorer, self.instance, self.heldout, &settings)
    }

    #[allow(clippy::too_many_arguments)]
    fn row(
        &self,
        method: &'static str,
        iteration: usize,
        seed: u64,
        surrogate: f64,
        exact_likelihood: f64,
        report: EvalReport,
        wall_time_s: f64,
    ) -> MetricsRow {
        MetricsRow {
            method,
            iteration,
            seed,
            surrogate,
            exact_likelihood,
            kl_to_expert: report.kl_to_expert,
            reward_accuracy: report.reward_accuracy,
            gt_score: report.ground_truth_score,
            win_rate_vs_ref: report.win_rate,
            heldout_demo_loglik: report.heldout_demo_loglik,
            wall_time_s: if self.eval.record_timing { wall_time_s } else { 0.0 },
        }
    }
}

/// Train one method on the given instance and demonstrations, producing one
/// metrics row per iteration (a single row for SFT).
pub fn run_single_method(
    instance: &Instance,
    demos: &DemonstrationDataset,
    heldout: &PreferenceDataset,
    method: Method,
    config: &ExperimentConfig,
) -> Result<MethodRun> {
    let ctx = EvalContext {
        instance,
        demos,
        heldout,
        eval: &config.eval,
    };
    match method {
        Method::Sft => {
            let started = Instant::now();
            let out = sft_train(instance.pi_ref(), demos, &config.sft)?;
            let elapsed = started.elapsed().as_secs_f64();
            let row = ctx.implicit_row("sft", 0, config.sft.seed, &out.policy, elapsed)?;
            Ok(MethodRun {
                rows: vec![row],
                artifacts: MethodArtifacts {
                    policy: out.policy,
                    reward: None,
                },
                aborted: out.aborted,
            })
        }
        Method::Spin => {
            let started = Instant::now();
            let out = spin_train(instance.pi_ref(), demos, &config.spin, Some(instance), Some(heldout))?;
            let elapsed = started.elapsed().as_secs_f64();
            let per_iter = elapsed / out.snapshots.len().max(1) as f64;
            let rows = out
                .snapshots
                .iter()
                .enumerate()
                .map(|(k, policy)| ctx.implicit_row("spin", k, config.spin.seed, policy, per_iter))
                .collect::<Result<Vec<_>>>()?;
            Ok(MethodRun {
                rows,
                artifacts: MethodArtifacts {
                    policy: out.policy,
                    reward: None,
                },
                aborted: None,
            })
        }
        Method::Irl => {
            let init_reward = RewardModel::tabular(
                instance.prompt_set().clone(),
                instance.vocab(),
                instance.horizon(),
                instance.c_r(),
            )?;
            let out = irl_align(demos, instance.pi_ref(), &init_reward, &config.irl, Some(instance))?;
            let mut rows = Vec::with_capacity(out.snapshots.len());
            for (record, snapshot) in out.records.iter().zip(&out.snapshots) {
                let report = ctx.report(&snapshot.policy, &snapshot.reward, "irl", record.iteration)?;
                rows.push(ctx.row(
                    "irl",
                    record.iteration,
                    config.irl.seed,
                    record.surrogate,
                    record.exact_likelihood.unwrap_or(f64::NAN),
                    report,
                    record.wall_time_s,
                ));
            }
            Ok(MethodRun {
                rows,
                artifacts: MethodArtifacts {
                    policy: out.policy,
                    reward: Some(out.reward),
                },
                aborted: out.aborted,
            })
        }
    }
}

/// Summary of a full [`run_experiment`] call.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub rows: Vec<MetricsRow>,
    /// True when any metric is non-finite or a trainer aborted; maps to exit
    /// code 2 at the CLI.
    pub degraded: bool,
    pub csv: String,
}

/// Execute every requested method on a shared instance and demonstration
/// set, then write `metrics.csv` and `summary.txt` under `out_dir`.
///
/// The entire output is a pure function of the config (wall times are zeroed
/// unless `eval.record_timing` is set).
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let instance = make_instance(&config.instance)?;
    let demos = sample_demonstrations(&instance, config.demo_count, config.demo_seed)?;
    let heldout = judge_heldout_preferences(
        &instance,
        config.eval.heldout_pref_pairs,
        seeding::derive(config.eval.heldout_seed, &[0x3e1d]),
    )?;

    let mut rows = Vec::new();
    let mut degraded = false;
    let mut notes = Vec::new();
    for &method in &config.methods {
        let run = run_single_method(&instance, &demos, &heldout, method, config)?;
        if let Some(reason) = &run.aborted {
            degraded = true;
            notes.push(format!("{}: aborted early: {reason}", method.name()));
        }
        rows.extend(run.rows);
        if degraded {
            // Keep whatever was computed, but stop launching further methods.
            break;
        }
    }
    if rows.iter().any(|r| !r.all_finite()) {
        degraded = true;
    }

    let csv = metrics_to_csv(&rows);
    fs::write(out_dir.join("metrics.csv"), &csv)?;
    fs::write(out_dir.join("summary.txt"), render_summary(config, &rows, &notes))?;
    Ok(RunSummary {
        rows,
        degraded,
        csv,
    })
}

fn render_summary(config: &ExperimentConfig, rows: &[MetricsRow], notes: &[String]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "instance: V={} H={} prompts={} beta={} seed={}\n",
        config.instance.vocab,
        config.instance.horizon,
        config.instance.prompt_count,
        config.instance.beta,
        config.instance.seed
    ));
    out.push_str(&format!("demonstrations: {} (seed {})\n\n", config.demo_count, config.demo_seed));
    for &method in &config.methods {
        let last = rows.iter().rfind(|r| r.method == method.name());
        match last {
            Some(r) => out.push_str(&format!(
                "{:<5} iter {}: accuracy={:.4} gt_score={:.4} win_rate={:.4} kl_to_expert={:.6} heldout_loglik={:.6}\n",
                r.method, r.iteration, r.reward_accuracy, r.gt_score, r.win_rate_vs_ref, r.kl_to_expert, r.heldout_demo_loglik
            )),
            None => out.push_str(&format!("{:<5} produced no rows\n", method.name())),
        }
    }
    for note in notes {
        out.push_str(&format!("note: {note}\n"));
    }
    out
}
