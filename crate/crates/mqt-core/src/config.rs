//! The experiment config file: strict JSON, lowercase snake-case keys,
//! unknown keys rejected. Every field except `regime` has a default, so a
//! minimal config is `{"regime": "mqt"}`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{TaskKind, TaskSpec};
use crate::train::{Regime, TokenSet, TokenSetKind};
use crate::vlm::ModelConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    #[serde(default)]
    pub token_set: TokenSetKind,
    /// Budget list for `token_set = "custom"`, ignored otherwise.
    #[serde(default)]
    pub custom_budgets: Vec<usize>,
    /// Required when `regime = "fixed"`.
    #[serde(default)]
    pub fixed_budget: Option<usize>,
    #[serde(default = "d_stage1_steps")]
    pub stage1_steps: usize,
    #[serde(default = "d_stage2_steps")]
    pub stage2_steps: usize,
    #[serde(default = "d_stage1_lr")]
    pub stage1_lr: f64,
    #[serde(default = "d_stage2_lr")]
    pub stage2_lr: f64,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Sample budgets in stage 1 as well (the first-stage elastic ablation).
    #[serde(default)]
    pub elastic_in_stage1: bool,
    /// Per-budget loss weights c_m; budgets not listed weigh 1.
    #[serde(default)]
    pub c_m: BTreeMap<usize, f64>,
    #[serde(default = "d_task")]
    pub task: TaskKind,
    /// Task noise level; the task's own default when absent.
    #[serde(default)]
    pub task_noise: Option<f64>,
    #[serde(default)]
    pub model: ModelConfig,
}

fn d_stage1_steps() -> usize {
    300
}
fn d_stage2_steps() -> usize {
    2000
}
fn d_stage1_lr() -> f64 {
    2e-3
}
fn d_stage2_lr() -> f64 {
    1e-3
}
fn d_batch_size() -> usize {
    32
}
fn d_task() -> TaskKind {
    TaskKind::DetailLocate
}

impl TrainConfig {
    /// Minimal valid config for the given regime with all defaults.
    pub fn defaults(regime: Regime) -> Self {
        serde_json::from_value(serde_json::json!({
            "regime": regime,
        }))
        .expect("default config")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_slice(bytes)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&bytes)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task_spec().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.stage1_lr.is_finite() && self.stage2_lr.is_finite()) {
            return Err(Error::Config("learning rates must be finite".into()));
        }
        match self.regime {
            Regime::Fixed => {
                let b = self.fixed_budget.ok_or_else(|| {
                    Error::Config("regime \"fixed\" requires fixed_budget".into())
                })?;
                if b < 1 || b > self.model.max_tokens {
                    return Err(Error::Config(format!(
                        "fixed_budget {b} outside 1..={}",
                        self.model.max_tokens
                    )));
                }
            }
            Regime::Mqt | Regime::Mrl => {
                self.token_set()?;
            }
        }
        if self.elastic_in_stage1 || self.regime != Regime::Fixed {
            self.token_set()?;
        }
        for (&m, &w) in &self.c_m {
            if m < 1 || m > self.model.max_tokens {
                return Err(Error::Config(format!(
                    "c_m key {m} outside 1..={}",
                    self.model.max_tokens
                )));
            }
            if !w.is_finite() {
                return Err(Error::Config(format!("c_m[{m}] must be finite")));
            }
        }
        Ok(())
    }

    pub fn token_set(&self) -> Result<TokenSet> {
        match self.token_set {
            TokenSetKind::Custom => TokenSet::custom(self.custom_budgets.clone(), self.model.max_tokens),
            kind => TokenSet::build(kind, self.model.max_tokens),
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        let mut spec = TaskSpec::new(self.task, self.seed);
        spec.image_size = self.model.image_size;
        spec.patch_size = self.model.patch_size;
        spec.channels = self.model.channels;
        spec.answer_classes = self.model.answer_classes;
        if let Some(noise) = self.task_noise {
            spec.noise = noise;
        }
        spec
    }

    /// Loss weight for budget m (1 unless configured otherwise).
    pub fn c_weight(&self, m: usize) -> f64 {
        self.c_m.get(&m).copied().unwrap_or(1.0)
    }

    /// Canonical bytes for snapshots and config hashing: pretty JSON with the
    /// struct's fixed field order.
    pub fn to_canonical_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("config serializes");
        bytes.push(b'\n');
        bytes
    }
}
