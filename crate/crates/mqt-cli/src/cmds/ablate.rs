//! `mqt ablate --config base.json`: the ablation matrix over
//! {linear, log} × {attention-then-projection, projection-then-attention} ×
//! {elastic stage 1 on/off}, sharing one seed so differences are attributable
//! to the config axis. `--single-change` restricts the matrix to the baseline
//! plus the three single-toggle variants; `--seeds k` averages accuracy over
//! k seeds.

use std::path::Path;
use std::time::Instant;

use clap::Args;
use serde::{Deserialize, Serialize};

use mqt_core::checkpoint;
use mqt_core::config::TrainConfig;
use mqt_core::qt::QtOrdering;
use mqt_core::train::{train_two_stage, TokenSetKind, TrainOutcome};

use super::{
    atomic_write, config_err, ensure_dir, evaluate_at, read_snapshot, sha256_hex, write_snapshot,
    CliResult, ExperimentResult,
};

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Run only the baseline plus the three single-change variants.
    #[arg(long)]
    pub single_change: bool,

    /// Seeds per variant; accuracies are averaged.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,

    /// Evaluation samples for the accuracy-at-maximum column.
    #[arg(long, default_value_t = 2000)]
    pub n_samples: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateResolved {
    pub base: TrainConfig,
    pub single_change: bool,
    pub seeds: u64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Axes {
    log_tokens: bool,
    proj_then_attn: bool,
    elastic_stage1: bool,
}

impl Axes {
    fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.log_tokens {
            parts.push("log_tokens");
        }
        if self.proj_then_attn {
            parts.push("proj_then_attn");
        }
        if self.elastic_stage1 {
            parts.push("elastic_stage1");
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }

    fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.token_set = if self.log_tokens { TokenSetKind::Log } else { TokenSetKind::Linear };
        cfg.model.ordering = if self.proj_then_attn {
            QtOrdering::ProjectionThenAttention
        } else {
            QtOrdering::AttentionThenProjection
        };
        cfg.elastic_in_stage1 = self.elastic_stage1;
        cfg
    }
}

fn variants(single_change: bool) -> Vec<Axes> {
    if single_change {
        vec![
            Axes { log_tokens: false, proj_then_attn: false, elastic_stage1: false },
            Axes { log_tokens: true, proj_then_attn: false, elastic_stage1: false },
            Axes { log_tokens: false, proj_then_attn: true, elastic_stage1: false },
            Axes { log_tokens: false, proj_then_attn: false, elastic_stage1: true },
        ]
    } else {
        let mut v = Vec::new();
        for &log_tokens in &[false, true] {
            for &proj_then_attn in &[false, true] {
                for &elastic_stage1 in &[false, true] {
                    v.push(Axes { log_tokens, proj_then_attn, elastic_stage1 });
                }
            }
        }
        v
    }
}

/// Train one config and write the standard train artifacts into `dir`.
/// Shared with `mqt train` semantics so compositions are bit-exact.
pub fn run_training_into(cfg: &TrainConfig, dir: &Path) -> CliResult<(TrainOutcome, Vec<u8>)> {
    cfg.validate()?;
    ensure_dir(dir)?;
    let resolved = cfg.to_canonical_json();
    atomic_write(&dir.join("resolved_config.json"), &resolved)?;
    let outcome = train_two_stage(cfg)?;
    let mut log_csv = Vec::new();
    outcome.log.write_csv(&mut log_csv)?;
    atomic_write(&dir.join("train_log.csv"), &log_csv)?;
    let (manifest, bin) = checkpoint::to_bytes(&outcome.model, &cfg.task_spec());
    atomic_write(&dir.join("checkpoint.bin"), &bin)?;
    atomic_write(&dir.join("checkpoint.json"), &manifest)?;
    Ok((outcome, resolved))
}

pub fn run(
    out_dir: &Path,
    config: Option<&Path>,
    seed_override: Option<u64>,
    args: &AblateArgs,
) -> CliResult<()> {
    let path = config.ok_or_else(|| config_err("ablate requires --config <file>"))?;
    // accept either a base training config or a previously written snapshot
    let bytes = std::fs::read(path)
        .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    let probe: serde_json::Value = serde_json::from_slice(&bytes)
        .map_err(|e| config_err(format!("invalid config {}: {e}", path.display())))?;
    let (mut base, single_change, seeds, n_samples) = if probe.get("base").is_some() {
        let snap: AblateResolved = read_snapshot(path)?;
        (snap.base, snap.single_change, snap.seeds, snap.n_samples)
    } else {
        (TrainConfig::from_json(&bytes)?, args.single_change, args.seeds, args.n_samples)
    };
    if let Some(seed) = seed_override {
        base.seed = seed;
    }
    if seeds == 0 {
        return Err(config_err("--seeds must be at least 1"));
    }
    base.validate()?;
    // every variant must be expressible; log sets need a power-of-two maximum
    if !base.model.max_tokens.is_power_of_two() {
        return Err(config_err(format!(
            "ablation needs a power-of-two max_tokens for the log-token variant, got {}",
            base.model.max_tokens
        )));
    }

    ensure_dir(out_dir)?;
    write_snapshot(
        out_dir,
        &AblateResolved { base: base.clone(), single_change, seeds, n_samples },
    )?;

    let mut csv = String::from(
        "variant,token_set,ordering,elastic_stage1,n_seeds,accuracy_at_max,config_hash\n",
    );
    for axes in variants(single_change) {
        let name = axes.name();
        let t0 = Instant::now();
        let mut per_seed = Vec::new();
        let mut first_hash = String::new();
        let mut first_log = out_dir.to_path_buf();
        for s in 0..seeds {
            let mut cfg = axes.apply(&base);
            cfg.seed = base.seed + s;
            let dir = out_dir.join(&name).join(format!("seed_{}", cfg.seed));
            let (outcome, resolved) = run_training_into(&cfg, &dir)?;
            let task = cfg.task_spec();
            let at_max = evaluate_at(
                &outcome.model,
                &task,
                task.seed,
                n_samples,
                &[cfg.model.max_tokens],
            )?;
            per_seed.push(at_max[0]);
            if s == 0 {
                first_hash = sha256_hex(&resolved);
                first_log = dir.join("train_log.csv");
            }
        }
        let mean = per_seed.iter().map(|a| a.accuracy).sum::<f64>() / per_seed.len() as f64;
        let result = ExperimentResult {
            config_hash: first_hash,
            accuracies: per_seed,
            train_log: first_log,
            wall_secs: t0.elapsed().as_secs_f64(),
            seed: base.seed,
        };
        println!(
            "{name}: accuracy@{} = {:.4} over {} seed(s) from seed {} in {:.1}s (log: {})",
            base.model.max_tokens,
            mean,
            result.accuracies.len(),
            result.seed,
            result.wall_secs,
            result.train_log.display()
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            name,
            if axes.log_tokens { "log" } else { "linear" },
            if axes.proj_then_attn { "projection-then-attention" } else { "attention-then-projection" },
            axes.elastic_stage1,
            seeds,
            mean,
            result.config_hash
        ));
    }
    atomic_write(&out_dir.join("ablate.csv"), csv.as_bytes())?;
    println!("wrote ablate.csv to {}", out_dir.display());
    Ok(())
}
