//! Shared plumbing for the subcommands: error-to-exit-code mapping, atomic
//! writes, config hashing, budget-list parsing, and evaluation helpers.

pub mod ablate;
pub mod export_attn;
pub mod flops;
pub mod sweep;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use mqt_core::rng::stream;
use mqt_core::tasks::{generate_dataset, Sample, TaskSpec};
use mqt_core::train::{evaluate_sweep, BudgetAccuracy};
use mqt_core::vlm::Model;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl From<mqt_core::Error> for CliError {
    fn from(e: mqt_core::Error) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Write-temp-then-rename so partially written artifacts never appear.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Load a resolved snapshot struct from a JSON file.
pub fn read_snapshot<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = fs::read(path)
        .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| config_err(format!("invalid snapshot {}: {e}", path.display())))
}

pub fn write_snapshot<T: serde::Serialize>(dir: &Path, value: &T) -> CliResult<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::Runtime(format!("snapshot serialization: {e}")))?;
    bytes.push(b'\n');
    atomic_write(&dir.join("resolved_config.json"), &bytes)?;
    Ok(bytes)
}

/// Expand a budgets argument against a maximum: `all`, `paper-linear`,
/// `paper-log`, or an explicit comma list. The result is ascending.
pub fn parse_budgets(arg: &str, max_tokens: usize) -> CliResult<Vec<usize>> {
    use mqt_core::train::{TokenSet, TokenSetKind};
    let budgets = match arg {
        "all" => (1..=max_tokens).collect(),
        "paper-linear" => TokenSet::build(TokenSetKind::Linear, max_tokens)?.budgets,
        "paper-log" => TokenSet::build(TokenSetKind::Log, max_tokens)?.budgets,
        list => {
            let mut v = Vec::new();
            for part in list.split(',') {
                let b: usize = part
                    .trim()
                    .parse()
                    .map_err(|_| config_err(format!("bad budget {part:?} in {list:?}")))?;
                v.push(b);
            }
            v.sort_unstable();
            v.dedup();
            v
        }
    };
    for &b in &budgets {
        if b < 1 || b > max_tokens {
            return Err(config_err(format!(
                "budget {b} outside 1..={max_tokens}"
            )));
        }
    }
    if budgets.is_empty() {
        return Err(config_err("empty budget list"));
    }
    Ok(budgets)
}

/// The evaluation split: `n` samples from the eval stream of the task,
/// re-seeded with `eval_seed` so it never overlaps the training stream.
pub fn eval_dataset(task: &TaskSpec, eval_seed: u64, n: usize) -> Vec<Sample> {
    let mut spec = *task;
    spec.seed = eval_seed;
    generate_dataset(&spec, stream::EVAL_DATA, 0, n)
}

/// Accuracy per budget on the standard evaluation split. Every command that
/// reports accuracy routes through here so results compose bit-exactly.
pub fn evaluate_at(
    model: &Model,
    task: &TaskSpec,
    eval_seed: u64,
    n: usize,
    budgets: &[usize],
) -> CliResult<Vec<BudgetAccuracy>> {
    let data = eval_dataset(task, eval_seed, n);
    Ok(evaluate_sweep(model, &data, budgets)?)
}

/// Result bundle for one training-plus-evaluation experiment.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config_hash: String,
    pub accuracies: Vec<BudgetAccuracy>,
    pub train_log: PathBuf,
    pub wall_secs: f64,
    pub seed: u64,
}
