//! `mqt train --config cfg.json`: run the two-stage schedule, then write the
//! checkpoint, the training log, and a resolved-config snapshot that re-runs
//! the experiment bit-exactly.

use std::path::Path;
use std::time::Instant;

use clap::Args;

use mqt_core::config::TrainConfig;

use super::ablate::run_training_into;
use super::{config_err, sha256_hex, CliResult};

#[derive(Debug, Args)]
pub struct TrainArgs {}

pub fn run(
    out_dir: &Path,
    config: Option<&Path>,
    seed_override: Option<u64>,
    _args: &TrainArgs,
) -> CliResult<()> {
    let path = config.ok_or_else(|| config_err("train requires --config <file>"))?;
    let mut cfg = TrainConfig::from_file(path)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }

    let t0 = Instant::now();
    let (outcome, resolved) = run_training_into(&cfg, out_dir)?;
    let wall = t0.elapsed().as_secs_f64();

    let last_loss = outcome.log.records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} + {} steps ({} regime, seed {}) in {wall:.1}s; final loss {last_loss:.4}",
        cfg.stage1_steps,
        cfg.stage2_steps,
        cfg.regime.as_str(),
        cfg.seed
    );
    println!(
        "wrote checkpoint.bin, checkpoint.json, train_log.csv, resolved_config.json to {} (config {})",
        out_dir.display(),
        &sha256_hex(&resolved)[..12]
    );
    Ok(())
}
