//! `mqt flops --dims llava7b-like --budgets 16,144,256 --baseline 576`:
//! exact per-component FLOPs and speed-up ratios against a baseline token
//! count, as both JSON and a human-readable table.

use std::path::Path;

use clap::Args;
use serde::{Deserialize, Serialize};

use mqt_core::flops::{pipeline_report, FlopsReport, PipelineDims};

use super::{atomic_write, config_err, ensure_dir, read_snapshot, write_snapshot, CliResult};

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Preset (`llava7b-like`, `toy`) or path to a dims JSON file.
    #[arg(long)]
    pub dims: Option<String>,

    /// Comma list of budgets to report.
    #[arg(long)]
    pub budgets: Option<String>,

    /// Baseline token count the speed-up ratios compare against.
    #[arg(long)]
    pub baseline: Option<u64>,

    /// Override the text length T used for the LM sequence (m + T).
    #[arg(long)]
    pub text_len: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsResolved {
    pub dims: PipelineDims,
    pub budgets: Vec<u64>,
    pub baseline: u64,
}

#[derive(Debug, Serialize)]
struct BudgetRow {
    #[serde(flatten)]
    report: FlopsReport,
    speedup_vs_baseline: f64,
}

#[derive(Debug, Serialize)]
struct FlopsOutput {
    dims: PipelineDims,
    baseline: u64,
    baseline_total: u64,
    /// How the default text length is derived from the target ratios.
    text_len_note: String,
    budgets: Vec<BudgetRow>,
}

fn load_dims(arg: &str) -> CliResult<PipelineDims> {
    if matches!(arg, "llava7b-like" | "toy") {
        return Ok(PipelineDims::preset(arg)?);
    }
    let path = Path::new(arg);
    if !path.exists() {
        return Err(config_err(format!(
            "dims {arg:?} is neither a preset (llava7b-like, toy) nor a readable file"
        )));
    }
    let bytes = std::fs::read(path)?;
    let dims: PipelineDims = serde_json::from_slice(&bytes)
        .map_err(|e| config_err(format!("invalid dims file {arg}: {e}")))?;
    Ok(dims)
}

fn parse_budget_list(arg: &str) -> CliResult<Vec<u64>> {
    let mut v = Vec::new();
    for part in arg.split(',') {
        v.push(
            part.trim()
                .parse::<u64>()
                .map_err(|_| config_err(format!("bad budget {part:?}")))?,
        );
    }
    if v.is_empty() || v.contains(&0) {
        return Err(config_err("budgets must be positive"));
    }
    Ok(v)
}

pub fn run(out_dir: &Path, config: Option<&Path>, args: &FlopsArgs) -> CliResult<()> {
    let snapshot: Option<FlopsResolved> = match config {
        Some(path) => Some(read_snapshot(path)?),
        None => None,
    };
    let mut dims = match (&args.dims, &snapshot) {
        (Some(arg), _) => load_dims(arg)?,
        (None, Some(s)) => s.dims,
        (None, None) => PipelineDims::llava7b_like(),
    };
    if let Some(t) = args.text_len {
        dims.text_len = t;
    }
    dims.validate()?;
    let budgets = match (&args.budgets, &snapshot) {
        (Some(arg), _) => parse_budget_list(arg)?,
        (None, Some(s)) => s.budgets.clone(),
        (None, None) => vec![16, 144, 256],
    };
    let baseline = args
        .baseline
        .or(snapshot.as_ref().map(|s| s.baseline))
        .unwrap_or(576);

    ensure_dir(out_dir)?;
    let resolved = FlopsResolved { dims, budgets: budgets.clone(), baseline };
    write_snapshot(out_dir, &resolved)?;

    let baseline_report = pipeline_report(&dims, baseline)?;
    let mut rows = Vec::new();
    for &m in &budgets {
        let report = pipeline_report(&dims, m)?;
        rows.push(BudgetRow {
            speedup_vs_baseline: baseline_report.total as f64 / report.total as f64,
            report,
        });
    }

    let output = FlopsOutput {
        dims,
        baseline,
        baseline_total: baseline_report.total,
        text_len_note: format!(
            "text_len {} satisfies (576+T)/(16+T)=8 exactly at T=64 in the linear-term limit, \
             which also gives (576+T)/(256+T)=2.0 and (576+T)/(144+T)=3.08",
            dims.text_len
        ),
        budgets: rows,
    };
    let mut json = serde_json::to_vec_pretty(&output)
        .map_err(|e| super::CliError::Runtime(format!("report serialization: {e}")))?;
    json.push(b'\n');
    atomic_write(&out_dir.join("flops.json"), &json)?;

    println!(
        "{:>7} {:>16} {:>16} {:>18} {:>14} {:>14} {:>18} {:>9}",
        "budget", "qt_attention", "qt_projections", "lm_linear", "lm_quadratic", "lm_head", "total", "speedup"
    );
    for row in &output.budgets {
        let r = &row.report;
        println!(
            "{:>7} {:>16} {:>16} {:>18} {:>14} {:>14} {:>18} {:>9.3}",
            r.budget,
            r.qt_attention,
            r.qt_projections,
            r.lm_linear,
            r.lm_attention_quadratic,
            r.lm_head,
            r.total,
            row.speedup_vs_baseline
        );
    }
    println!(
        "baseline {} tokens: total {} FLOPs; wrote flops.json to {}",
        baseline,
        baseline_report.total,
        out_dir.display()
    );
    Ok(())
}
