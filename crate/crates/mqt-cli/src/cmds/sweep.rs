//! `mqt sweep --checkpoint ckpt --budgets 2,4,8`: accuracy at each budget on
//! the evaluation split, written as `budget,task,accuracy,n_samples` rows in
//! ascending budget order.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use mqt_core::checkpoint;

use super::{
    atomic_write, config_err, ensure_dir, evaluate_at, parse_budgets, read_snapshot,
    write_snapshot, CliResult,
};

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Checkpoint stem (or its .bin/.json path).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    /// `all`, `paper-linear`, `paper-log`, or a comma list like `2,4,8`.
    #[arg(long)]
    pub budgets: Option<String>,

    /// Evaluation samples per budget.
    #[arg(long)]
    pub n_samples: Option<usize>,

    /// Seed of the evaluation split (defaults to the checkpoint's task seed).
    #[arg(long)]
    pub eval_seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepResolved {
    pub checkpoint: PathBuf,
    pub budgets: Vec<usize>,
    pub n_samples: usize,
    pub eval_seed: u64,
}

pub fn run(out_dir: &Path, config: Option<&Path>, args: &SweepArgs) -> CliResult<()> {
    let snapshot: Option<SweepResolved> = match config {
        Some(path) => Some(read_snapshot(path)?),
        None => None,
    };
    let checkpoint_path = args
        .checkpoint
        .clone()
        .or_else(|| snapshot.as_ref().map(|s| s.checkpoint.clone()))
        .ok_or_else(|| config_err("sweep requires --checkpoint (or a snapshot via --config)"))?;

    let (model, task) = checkpoint::load(&checkpoint_path)?;
    let budgets = match (&args.budgets, &snapshot) {
        (Some(spec), _) => parse_budgets(spec, model.cfg.max_tokens)?,
        (None, Some(s)) => {
            let b = s.budgets.clone();
            for &x in &b {
                if x < 1 || x > model.cfg.max_tokens {
                    return Err(config_err(format!(
                        "budget {x} outside 1..={}",
                        model.cfg.max_tokens
                    )));
                }
            }
            b
        }
        (None, None) => parse_budgets("paper-log", model.cfg.max_tokens)?,
    };
    let n_samples = args
        .n_samples
        .or(snapshot.as_ref().map(|s| s.n_samples))
        .unwrap_or(2000);
    let eval_seed = args
        .eval_seed
        .or(snapshot.as_ref().map(|s| s.eval_seed))
        .unwrap_or(task.seed);

    ensure_dir(out_dir)?;
    let resolved = SweepResolved {
        checkpoint: checkpoint_path.clone(),
        budgets: budgets.clone(),
        n_samples,
        eval_seed,
    };
    write_snapshot(out_dir, &resolved)?;

    let results = evaluate_at(&model, &task, eval_seed, n_samples, &budgets)?;
    let mut csv = String::from("budget,task,accuracy,n_samples\n");
    for r in &results {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.budget,
            task.name.as_str(),
            r.accuracy,
            r.n
        ));
    }
    atomic_write(&out_dir.join("sweep.csv"), csv.as_bytes())?;

    for r in &results {
        println!("budget {:>4}: accuracy {:.4} (n={})", r.budget, r.accuracy, r.n);
    }
    println!("wrote sweep.csv to {}", out_dir.display());
    Ok(())
}
