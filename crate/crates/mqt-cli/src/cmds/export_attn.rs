//! `mqt export-attn --checkpoint ckpt --budget 8 --samples 3`: head-averaged
//! attention weights over grid cells, one CSV per image.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use mqt_core::checkpoint;
use mqt_core::qt::export_attention;
use mqt_core::vlm::patch_embed;

use super::{atomic_write, config_err, ensure_dir, eval_dataset, read_snapshot, write_snapshot, CliResult};

#[derive(Debug, Args)]
pub struct ExportAttnArgs {
    /// Checkpoint stem (or its .bin/.json path).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    /// Token budget for the attention map.
    #[arg(long)]
    pub budget: Option<usize>,

    /// Number of evaluation images to export.
    #[arg(long)]
    pub samples: Option<usize>,

    /// Seed of the evaluation split (defaults to the checkpoint's task seed).
    #[arg(long)]
    pub eval_seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportAttnResolved {
    pub checkpoint: PathBuf,
    pub budget: usize,
    pub samples: usize,
    pub eval_seed: u64,
}

pub fn run(out_dir: &Path, config: Option<&Path>, args: &ExportAttnArgs) -> CliResult<()> {
    let snapshot: Option<ExportAttnResolved> = match config {
        Some(path) => Some(read_snapshot(path)?),
        None => None,
    };
    let checkpoint_path = args
        .checkpoint
        .clone()
        .or_else(|| snapshot.as_ref().map(|s| s.checkpoint.clone()))
        .ok_or_else(|| config_err("export-attn requires --checkpoint"))?;
    let (model, task) = checkpoint::load(&checkpoint_path)?;
    let budget = args
        .budget
        .or(snapshot.as_ref().map(|s| s.budget))
        .ok_or_else(|| config_err("export-attn requires --budget"))?;
    let samples = args
        .samples
        .or(snapshot.as_ref().map(|s| s.samples))
        .unwrap_or(1);
    let eval_seed = args
        .eval_seed
        .or(snapshot.as_ref().map(|s| s.eval_seed))
        .unwrap_or(task.seed);

    ensure_dir(out_dir)?;
    write_snapshot(
        out_dir,
        &ExportAttnResolved {
            checkpoint: checkpoint_path.clone(),
            budget,
            samples,
            eval_seed,
        },
    )?;

    let data = eval_dataset(&task, eval_seed, samples);
    for (i, sample) in data.iter().enumerate() {
        let grid = patch_embed(&sample.image, &model.patch, &model.cfg)?;
        let map = export_attention(&grid, &model.bank, budget, &model.qt)?;
        let mut csv = Vec::new();
        map.write_csv(&mut csv)?;
        atomic_write(&out_dir.join(format!("attention_{i:03}.csv")), &csv)?;
    }
    println!(
        "wrote {} attention map(s) at budget {budget} to {}",
        data.len(),
        out_dir.display()
    );
    Ok(())
}
