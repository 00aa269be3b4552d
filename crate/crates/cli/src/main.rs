//! Command-line driver: generate instances, train the demonstration-only
//! methods, evaluate policies against the ground-truth judge, and run the
//! verification suites.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use irl_align_core::evalx::{evaluate_policy, judge_heldout_preferences, EvalSettings};
use irl_align_core::objectives::ImplicitReward;
use irl_align_core::seeding;
use irl_align_core::workbench::{
    default_config, load_instance, load_policy, load_reward, make_instance, read_demonstrations,
    run_experiment, run_single_method, sample_demonstrations, save_instance, save_policy,
    save_reward, write_demonstrations, CheckOutcome, ExperimentConfig, InstanceSpec, Method,
    METRICS_HEADER,
};

#[derive(Parser)]
#[command(
    name = "irl-align",
    about = "Desk-scale alignment from demonstrations: joint IRL reward/policy learning with SFT and SPIN baselines",
    version
)]
struct Cli {
    /// Override the seed of whatever the subcommand runs.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Size of the rayon thread pool (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Print the default experiment configuration as JSON and exit.
    #[arg(long)]
    dump_defaults: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an instance directory (and a demonstration file) from a spec.
    Gen(GenArgs),
    /// Train behavior cloning on a demonstration file.
    Sft(TrainArgs),
    /// Train SPIN (iterative DPO on demo-vs-generation pairs).
    Spin(TrainArgs),
    /// Run the alternating reward/policy alignment loop.
    Irl(TrainArgs),
    /// Evaluate a saved policy (and optionally reward) on an instance.
    Eval(EvalArgs),
    /// Run a verification suite.
    Verify(VerifyArgs),
    /// Run a full multi-method experiment from a config file.
    Run(RunArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Instance spec JSON file.
    #[arg(long)]
    spec: PathBuf,
    /// Output directory for the instance files.
    #[arg(long)]
    out: PathBuf,
    /// Demonstrations to sample into demos.jsonl.
    #[arg(long, default_value_t = 200)]
    demos: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Instance directory produced by `gen`.
    #[arg(long)]
    instance: PathBuf,
    /// Demonstrations JSONL file.
    #[arg(long)]
    demos: PathBuf,
    /// Experiment config JSON (the method's section and `eval` are used).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for metrics and artifacts.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    instance: PathBuf,
    /// Policy JSON file (probability table).
    #[arg(long)]
    policy: PathBuf,
    /// Reward JSON file; the policy's implicit reward is scored when absent.
    #[arg(long)]
    reward: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Held-out preference pairs to judge against.
    #[arg(long, default_value_t = 2000)]
    pairs: usize,
    /// Win-rate matches against the reference policy.
    #[arg(long, default_value_t = 2000)]
    matches: usize,
}

#[derive(Args)]
struct VerifyArgs {
    /// Which suite to run.
    #[arg(value_enum)]
    suite: VerifySuite,
}

#[derive(Clone, Copy, ValueEnum)]
enum VerifySuite {
    Gradient,
    Concentration,
    Identities,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON (see --dump-defaults for the schema).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for metrics.csv and summary.txt.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("warning: could not configure thread pool: {e}");
        }
    }
    if cli.dump_defaults {
        println!(
            "{}",
            serde_json::to_string_pretty(&default_config()).expect("default config serializes")
        );
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (try --help)");
        return ExitCode::from(2);
    };
    match dispatch(command, cli.seed) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command, seed: Option<u64>) -> Result<ExitCode> {
    match command {
        Command::Gen(args) => gen(args, seed),
        Command::Sft(args) => train(args, Method::Sft, seed),
        Command::Spin(args) => train(args, Method::Spin, seed),
        Command::Irl(args) => train(args, Method::Irl, seed),
        Command::Eval(args) => eval(args, seed),
        Command::Verify(args) => verify(args, seed),
        Command::Run(args) => run(args),
    }
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    config.validate()?;
    Ok(config)
}

fn gen(args: GenArgs, seed: Option<u64>) -> Result<ExitCode> {
    let text = fs::read_to_string(&args.spec)
        .with_context(|| format!("reading spec {}", args.spec.display()))?;
    let mut spec: InstanceSpec = serde_json::from_str(&text)
        .with_context(|| format!("parsing spec {}", args.spec.display()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let instance = make_instance(&spec)?;
    save_instance(&args.out, &instance, &spec)?;
    let demos = sample_demonstrations(&instance, args.demos, seeding::derive(spec.seed, &[0xde30]))?;
    write_demonstrations(&args.out.join("demos.jsonl"), &demos)?;
    println!(
        "instance written to {} (V={} H={} prompts={} C_p={:.4}); {} demonstrations",
        args.out.display(),
        spec.vocab,
        spec.horizon,
        spec.prompt_count,
        instance.c_p(),
        args.demos
    );
    Ok(ExitCode::SUCCESS)
}

fn train(args: TrainArgs, method: Method, seed: Option<u64>) -> Result<ExitCode> {
    let mut config = read_config(&args.config)?;
    if let Some(s) = seed {
        match method {
            Method::Sft => config.sft.seed = s,
            Method::Spin => config.spin.seed = s,
            Method::Irl => config.irl.seed = s,
        }
    }
    let (instance, _) = load_instance(&args.instance)?;
    let demos = read_demonstrations(&args.demos, instance.vocab(), instance.horizon())?;
    let heldout = judge_heldout_preferences(
        &instance,
        config.eval.heldout_pref_pairs,
        seeding::derive(config.eval.heldout_seed, &[0x3e1d]),
    )?;
    let run = run_single_method(&instance, &demos, &heldout, method, &config)?;

    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("metrics.csv"),
        irl_align_core::workbench::metrics_to_csv(&run.rows),
    )?;
    save_policy(&args.out.join("policy.json"), &run.artifacts.policy)?;
    if let Some(reward) = &run.artifacts.reward {
        save_reward(&args.out.join("reward.json"), reward)?;
    }
    for row in &run.rows {
        println!(
            "{} iter {}: accuracy={:.4} gt_score={:.4} win_rate={:.4} heldout_loglik={:.4}",
            row.method, row.iteration, row.reward_accuracy, row.gt_score, row.win_rate_vs_ref,
            row.heldout_demo_loglik
        );
    }
    if let Some(reason) = run.aborted {
        eprintln!("aborted early: {reason}");
        return Ok(ExitCode::from(2));
    }
    if run.rows.iter().any(|r| !r.all_finite()) {
        eprintln!("non-finite metric in output");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(args: EvalArgs, seed: Option<u64>) -> Result<ExitCode> {
    let (instance, _) = load_instance(&args.instance)?;
    let policy = load_policy(&args.policy, instance.prompt_set().clone())?;
    let reward = args
        .reward
        .as_ref()
        .map(|p| load_reward(p, instance.prompt_set().clone(), instance.vocab(), instance.horizon()))
        .transpose()?;
    let eval_seed = seed.unwrap_or(7);
    let heldout = judge_heldout_preferences(&instance, args.pairs, seeding::derive(eval_seed, &[0x3e1d]))?;
    let settings = EvalSettings {
        win_rate_matches: args.matches,
        seed: eval_seed,
    };
    let report = match &reward {
        Some(r) => evaluate_policy(&policy, r, &instance, &heldout, &settings)?,
        None => {
            let implicit = ImplicitReward {
                policy: &policy,
                reference: instance.pi_ref(),
                beta: instance.beta(),
            };
            evaluate_policy(&policy, &implicit, &instance, &heldout, &settings)?
        }
    };
    let csv = format!(
        "reward_accuracy,gt_score,win_rate_vs_ref,kl_to_expert,heldout_demo_loglik\n{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
        report.reward_accuracy,
        report.ground_truth_score,
        report.win_rate,
        report.kl_to_expert,
        report.heldout_demo_loglik
    );
    fs::write(&args.out, &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn verify(args: VerifyArgs, seed: Option<u64>) -> Result<ExitCode> {
    let seed = seed.unwrap_or(0);
    let outcomes: Vec<CheckOutcome> = match args.suite {
        VerifySuite::Gradient => irl_align_core::workbench::verify_gradient(seed)?,
        VerifySuite::Concentration => irl_align_core::workbench::verify_concentration(seed)?,
        VerifySuite::Identities => irl_align_core::workbench::verify_identities(seed)?,
    };
    let mut all_passed = true;
    for outcome in &outcomes {
        println!(
            "{}: {} ({})",
            outcome.name,
            if outcome.passed { "PASS" } else { "FAIL" },
            outcome.detail
        );
        all_passed &= outcome.passed;
    }
    if !all_passed {
        bail!("verification failed");
    }
    Ok(ExitCode::SUCCESS)
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let config = read_config(&args.config)?;
    let summary = run_experiment(&config, &args.out)?;
    println!("{}", fs::read_to_string(args.out.join("summary.txt"))?);
    println!(
        "{} rows ({}) written to {}",
        summary.rows.len(),
        METRICS_HEADER,
        args.out.join("metrics.csv").display()
    );
    if summary.degraded {
        eprintln!("run degraded: non-finite metrics or early abort; partial CSV kept");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}
