//! On-disk formats: JSONL datasets, policy and reward JSON files, and the
//! instance directory layout.
//!
//! All record schemas are fail-closed: unknown fields reject the line. JSONL
//! parse errors carry 1-based line numbers.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::objectives::{DemonstrationDataset, PreferenceDataset, PreferenceItem};
use crate::seqcore::{Instance, PromptSet, RewardKind, RewardModel, SequencePolicy, TokenSeq};
use crate::{CoreError, Result};

use super::InstanceSpec;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoRecord {
    prompt: Vec<u32>,
    completion: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PrefRecord {
    prompt: Vec<u32>,
    chosen: Vec<u32>,
    rejected: Vec<u32>,
}

fn jsonl_err(path: &Path, line: usize, msg: impl Into<String>) -> CoreError {
    CoreError::Jsonl {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn check_tokens(path: &Path, line: usize, tokens: &[u32], vocab: u32) -> Result<()> {
    if tokens.iter().any(|&t| t >= vocab) {
        return Err(jsonl_err(path, line, "token out of range"));
    }
    Ok(())
}

fn check_completion(path: &Path, line: usize, tokens: &[u32], vocab: u32, horizon: u32) -> Result<()> {
    check_tokens(path, line, tokens, vocab)?;
    if tokens.len() != horizon as usize {
        return Err(jsonl_err(
            path,
            line,
            format!("horizon mismatch: expected {horizon}, got {}", tokens.len()),
        ));
    }
    Ok(())
}

/// Write one JSON object per line: `{"prompt": [...], "completion": [...]}`.
///
/// Weighted (full-population) datasets have no JSONL representation and are
/// rejected.
pub fn write_demonstrations(path: &Path, demos: &DemonstrationDataset) -> Result<()> {
    if demos.is_weighted() {
        return Err(CoreError::invalid(
            "demonstrations",
            "weighted datasets cannot be serialized to JSONL",
        ));
    }
    let mut out = fs::File::create(path)?;
    for (x, y) in demos.items() {
        let record = DemoRecord {
            prompt: x.tokens().to_vec(),
            completion: y.tokens().to_vec(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a demonstrations JSONL file, validating token range and completion
/// length against `(vocab, horizon)`.
pub fn read_demonstrations(path: &Path, vocab: u32, horizon: u32) -> Result<DemonstrationDataset> {
    let file = fs::File::open(path)?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DemoRecord =
            serde_json::from_str(&line).map_err(|e| jsonl_err(path, line_no, e.to_string()))?;
        check_tokens(path, line_no, &record.prompt, vocab)?;
        check_completion(path, line_no, &record.completion, vocab, horizon)?;
        items.push((TokenSeq::new(record.prompt), TokenSeq::new(record.completion)));
    }
    DemonstrationDataset::new(items)
}

/// Write `{"prompt": [...], "chosen": [...], "rejected": [...]}` lines.
pub fn write_preferences(path: &Path, prefs: &PreferenceDataset) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for item in prefs.items() {
        let record = PrefRecord {
            prompt: item.prompt.tokens().to_vec(),
            chosen: item.chosen.tokens().to_vec(),
            rejected: item.rejected.tokens().to_vec(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_preferences(path: &Path, vocab: u32, horizon: u32) -> Result<PreferenceDataset> {
    let file = fs::File::open(path)?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PrefRecord =
            serde_json::from_str(&line).map_err(|e| jsonl_err(path, line_no, e.to_string()))?;
        check_tokens(path, line_no, &record.prompt, vocab)?;
        check_completion(path, line_no, &record.chosen, vocab, horizon)?;
        check_completion(path, line_no, &record.rejected, vocab, horizon)?;
        items.push(PreferenceItem {
            prompt: TokenSeq::new(record.prompt),
            chosen: TokenSeq::new(record.chosen),
            rejected: TokenSeq::new(record.rejected),
        });
    }
    PreferenceDataset::new(items)
}

/// Probability table keyed by prompt index, then lexicographic completion
/// index.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    vocab: u32,
    horizon: u32,
    probs: Vec<Vec<f64>>,
}

pub fn save_policy(path: &Path, policy: &SequencePolicy) -> Result<()> {
    let file = PolicyFile {
        vocab: policy.vocab(),
        horizon: policy.horizon(),
        probs: (0..policy.prompts().len())
            .map(|p| policy.row(p).to_vec())
            .collect(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Load a policy table against a known prompt set; shape and normalization
/// are re-validated.
pub fn load_policy(path: &Path, prompts: Arc<PromptSet>) -> Result<SequencePolicy> {
    let file: PolicyFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    SequencePolicy::from_table(prompts, file.vocab, file.horizon, file.probs)
}

#[derive(Debug, Serialize, Deserialize)]
struct RewardFileRepr {
    #[serde(flatten)]
    kind: RewardKind,
    c_r: f64,
    params: Vec<f64>,
}

pub fn save_reward(path: &Path, reward: &RewardModel) -> Result<()> {
    let file = RewardFileRepr {
        kind: reward.kind().clone(),
        c_r: reward.c_r(),
        params: reward.params().to_vec(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_reward(
    path: &Path,
    prompts: Arc<PromptSet>,
    vocab: u32,
    horizon: u32,
) -> Result<RewardModel> {
    let file: RewardFileRepr = serde_json::from_str(&fs::read_to_string(path)?)?;
    match file.kind {
        RewardKind::Tabular => {
            RewardModel::tabular_with_params(prompts, vocab, horizon, file.c_r, file.params)
        }
        RewardKind::Linear {
            feature_dim,
            feature_seed,
        } => RewardModel::linear_with_params(
            prompts,
            vocab,
            horizon,
            file.c_r,
            feature_dim,
            feature_seed,
            file.params,
        ),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    spec: InstanceSpec,
    prompts: Vec<Vec<u32>>,
    prompt_weights: Vec<f64>,
    c_p: f64,
}

/// Write `instance.json`, `r_star.json`, `pi_ref.json`, and `pi_expert.json`
/// into `dir` (created if missing).
pub fn save_instance(dir: &Path, instance: &Instance, spec: &InstanceSpec) -> Result<()> {
    fs::create_dir_all(dir)?;
    let file = InstanceFile {
        spec: spec.clone(),
        prompts: instance
            .prompt_set()
            .prompts()
            .iter()
            .map(|p| p.tokens().to_vec())
            .collect(),
        prompt_weights: instance.prompt_set().weights().to_vec(),
        c_p: instance.c_p(),
    };
    fs::write(dir.join("instance.json"), serde_json::to_string_pretty(&file)?)?;
    save_reward(&dir.join("r_star.json"), instance.r_star())?;
    save_policy(&dir.join("pi_ref.json"), instance.pi_ref())?;
    save_policy(&dir.join("pi_expert.json"), instance.pi_expert())?;
    Ok(())
}

/// Load and re-validate an instance directory written by [`save_instance`].
pub fn load_instance(dir: &Path) -> Result<(Instance, InstanceSpec)> {
    let file: InstanceFile =
        serde_json::from_str(&fs::read_to_string(dir.join("instance.json"))?)?;
    let prompts = Arc::new(PromptSet::with_weights(
        file.prompts.into_iter().map(TokenSeq::new).collect(),
        file.prompt_weights,
    )?);
    let spec = file.spec;
    let r_star = load_reward(&dir.join("r_star.json"), prompts.clone(), spec.vocab, spec.horizon)?;
    let pi_ref = load_policy(&dir.join("pi_ref.json"), prompts.clone())?;
    let pi_expert = load_policy(&dir.join("pi_expert.json"), prompts.clone())?;
    let instance = Instance::new(
        spec.vocab,
        spec.horizon,
        prompts,
        r_star,
        pi_ref,
        pi_expert,
        spec.beta,
        file.c_p,
        spec.seed,
    )?;
    Ok((instance, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workbench::{make_instance, sample_demonstrations};

    #[test]
    fn demonstrations_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let inst = make_instance(&InstanceSpec::default()).unwrap();
        let demos = sample_demonstrations(&inst, 50, 3).unwrap();
        let path = dir.path().join("demos.jsonl");
        write_demonstrations(&path, &demos).unwrap();
        let loaded = read_demonstrations(&path, inst.vocab(), inst.horizon()).unwrap();
        assert_eq!(loaded.items(), demos.items());
    }

    #[test]
    fn specific_demo_line_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.jsonl");
        fs::write(&path, "{\"prompt\":[0,1],\"completion\":[1,0,2]}\n").unwrap();
        let demos = read_demonstrations(&path, 3, 3).unwrap();
        assert_eq!(demos.len(), 1);
        assert_eq!(demos.item(0).0.tokens(), &[0, 1]);
        assert_eq!(demos.item(0).1.tokens(), &[1, 0, 2]);
    }

    #[test]
    fn missing_field_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            "{\"prompt\":[0],\"completion\":[1,0,2]}\n{\"prompt\":[0,1]}\n",
        )
        .unwrap();
        let err = read_demonstrations(&path, 3, 3).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":2:"), "{msg}");
        assert!(msg.contains("completion"), "{msg}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.jsonl");
        fs::write(
            &path,
            "{\"prompt\":[0],\"completion\":[1,0,2],\"note\":\"hi\"}\n",
        )
        .unwrap();
        let err = read_demonstrations(&path, 3, 3).unwrap_err();
        assert!(err.to_string().contains(":1:"));
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("range.jsonl");
        fs::write(&path, "{\"prompt\":[0],\"completion\":[1,0,3]}\n").unwrap();
        let err = read_demonstrations(&path, 3, 3).unwrap_err();
        assert!(err.to_string().contains("token out of range"));
    }

    #[test]
    fn preferences_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let inst = make_instance(&InstanceSpec::default()).unwrap();
        let prefs = crate::evalx::judge_heldout_preferences(&inst, 40, 5).unwrap();
        let path = dir.path().join("prefs.jsonl");
        write_preferences(&path, &prefs).unwrap();
        let loaded = read_preferences(&path, inst.vocab(), inst.horizon()).unwrap();
        assert_eq!(loaded.items(), prefs.items());
    }

    #[test]
    fn instance_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = InstanceSpec::default();
        let inst = make_instance(&spec).unwrap();
        save_instance(dir.path(), &inst, &spec).unwrap();
        let (loaded, loaded_spec) = load_instance(dir.path()).unwrap();
        assert_eq!(loaded_spec, spec);
        assert_eq!(loaded.c_p().to_bits(), inst.c_p().to_bits());
        for p in 0..spec.prompt_count {
            for j in 0..inst.n_completions() {
                assert_eq!(
                    loaded.pi_expert().prob_indexed(p, j).to_bits(),
                    inst.pi_expert().prob_indexed(p, j).to_bits()
                );
            }
        }
    }
}
