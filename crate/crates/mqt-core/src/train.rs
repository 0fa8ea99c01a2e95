//! Training regimes and the two-stage schedule.
//!
//! Three regimes share one step executor, which builds a single graph over a
//! list of (budget, weight) pairs and takes one optimizer step on the summed
//! loss:
//!
//! - `mqt`: tail-drop training — one budget sampled per step, tokens past it
//!   dropped. The graph never exceeds the largest budget in the set.
//! - `mrl`: the joint baseline — every budget in the set forwarded each step,
//!   losses summed. Per step this forwards Σ(set) query tokens, against the
//!   sampled-budget average of roughly half the maximum for the linear set.
//! - `fixed`: one constant budget throughout, the conventional baseline.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::optim::{adam_update, AdamParams, AdamState};
use crate::rng::{rng_for, stream};
use crate::tape::Tape;
use crate::tasks::{generate_dataset, Sample};
use crate::vlm::{forward_loss_tape, predict, Model, TrainScope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Mqt,
    Mrl,
    Fixed,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Mqt => "mqt",
            Regime::Mrl => "mrl",
            Regime::Fixed => "fixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenSetKind {
    #[default]
    Linear,
    Log,
    Custom,
}

/// The set S of budgets sampled during training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSet {
    pub kind: TokenSetKind,
    pub budgets: Vec<usize>,
}

impl TokenSet {
    /// Linear: {2, 4, 6, …, M}. Log: {2, 4, 8, …, M}, M a power of two.
    pub fn build(kind: TokenSetKind, max_tokens: usize) -> Result<Self> {
        if max_tokens < 2 {
            return Err(Error::Config(format!(
                "token set needs max_tokens of at least 2, got {max_tokens}"
            )));
        }
        let budgets = match kind {
            TokenSetKind::Linear => {
                if max_tokens % 2 != 0 {
                    return Err(Error::Config(format!(
                        "linear token set needs an even maximum, got {max_tokens}"
                    )));
                }
                (1..=max_tokens / 2).map(|i| 2 * i).collect()
            }
            TokenSetKind::Log => {
                if !max_tokens.is_power_of_two() {
                    return Err(Error::Config(format!(
                        "log token set needs a power-of-two maximum, got {max_tokens}"
                    )));
                }
                let mut v = Vec::new();
                let mut b = 2;
                while b <= max_tokens {
                    v.push(b);
                    b *= 2;
                }
                v
            }
            TokenSetKind::Custom => {
                return Err(Error::Config(
                    "custom token sets are built from an explicit budget list".into(),
                ))
            }
        };
        Ok(TokenSet { kind, budgets })
    }

    pub fn custom(budgets: Vec<usize>, max_tokens: usize) -> Result<Self> {
        if budgets.is_empty() {
            return Err(Error::Config("custom token set is empty".into()));
        }
        let sorted = budgets.windows(2).all(|w| w[0] < w[1]);
        if !sorted {
            return Err(Error::Config(
                "custom budgets must be sorted and distinct".into(),
            ));
        }
        if budgets[0] < 1 || *budgets.last().unwrap() > max_tokens {
            return Err(Error::Config(format!(
                "custom budgets must lie in 1..={max_tokens}"
            )));
        }
        Ok(TokenSet { kind: TokenSetKind::Custom, budgets })
    }

    pub fn singleton(budget: usize) -> Self {
        TokenSet { kind: TokenSetKind::Custom, budgets: vec![budget] }
    }

    pub fn len(&self) -> usize {
        self.budgets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.budgets.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.budgets.iter().sum::<usize>() as f64 / self.budgets.len() as f64
    }

    pub fn sum(&self) -> usize {
        self.budgets.iter().sum()
    }

    pub fn max(&self) -> usize {
        *self.budgets.last().unwrap()
    }
}

/// Uniform draw over the set, deterministic per generator state.
pub fn sample_budget(set: &TokenSet, rng: &mut ChaCha8Rng) -> usize {
    set.budgets[rng.random_range(0..set.budgets.len())]
}

// ── Logging ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct TrainLogRecord {
    pub step: usize,
    pub stage: u8,
    pub regime: Regime,
    pub budget: usize,
    pub loss: f64,
    pub cum_query_tokens: u64,
}

/// Append-only per-step training log with cumulative query-token accounting.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<TrainLogRecord>,
    cum_query_tokens: u64,
}

impl TrainLog {
    pub fn new() -> Self {
        TrainLog::default()
    }

    pub fn cum_query_tokens(&self) -> u64 {
        self.cum_query_tokens
    }

    fn push(&mut self, step: usize, stage: u8, regime: Regime, budget: usize, loss: f64, tokens: u64) {
        self.cum_query_tokens += tokens;
        self.records.push(TrainLogRecord {
            step,
            stage,
            regime,
            budget,
            loss,
            cum_query_tokens: self.cum_query_tokens,
        });
    }

    pub fn write_csv(&self, out: &mut dyn std::io::Write) -> std::io::Result<()> {
        out.write_all(b"step,stage,regime,budget,loss,cum_query_tokens\n")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step,
                r.stage,
                r.regime.as_str(),
                r.budget,
                r.loss,
                r.cum_query_tokens
            )?;
        }
        Ok(())
    }
}

/// Cost accounting for one optimizer step.
#[derive(Debug, Clone)]
pub struct StepStats {
    /// (budget, weighted mean batch loss) per forwarded configuration.
    pub losses: Vec<(usize, f64)>,
    /// Model configurations forwarded this step (1 for mqt/fixed, |set| for mrl).
    pub forward_passes: usize,
    /// Reverse sweeps this step (always 1: regimes differ in graph size, not
    /// in backward count).
    pub backward_passes: usize,
    /// Query-token forwards this step: Σ budgets × batch size.
    pub query_tokens: u64,
    /// Largest budget materialized in the graph this step.
    pub max_graph_budget: usize,
}

/// One optimizer step over a batch at the given (budget, weight) pairs.
/// Builds a single graph, sums the weighted per-budget mean losses, runs one
/// backward sweep, and applies Adam to every trainable parameter.
pub fn step_at_budgets(
    model: &mut Model,
    batch: &[Sample],
    budgets: &[(usize, f64)],
    scope: TrainScope,
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<StepStats> {
    if batch.is_empty() || budgets.is_empty() {
        return Err(Error::Config("empty batch or budget list".into()));
    }
    let cfg = model.cfg;
    let mut tape = Tape::new();
    let ids = model.register(&mut tape, scope);

    let inv_b = 1.0 / batch.len() as f64;
    let mut per_budget = Vec::with_capacity(budgets.len());
    let mut total = None;
    for &(m, c_m) in budgets {
        let mut sum = None;
        for sample in batch {
            let loss = forward_loss_tape(&mut tape, &ids, &sample.image, &sample.qa, m, 1.0, &cfg)?;
            sum = Some(match sum {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
        }
        let mean = tape.scale(sum.unwrap(), c_m * inv_b)?;
        per_budget.push((m, tape.scalar(mean)));
        total = Some(match total {
            None => mean,
            Some(acc) => tape.add(acc, mean)?,
        });
    }
    let total = total.unwrap();
    tape.backward(total)?;
    let grads = model.collect_grads(&tape, &ids);

    let t = state.begin_step();
    model.for_each_param_mut(&mut |name, tensor| {
        if let Some(g) = grads.get(&name) {
            let (m_buf, v_buf) = state.slot(&name, g.len());
            adam_update(tensor.data_mut(), g, m_buf, v_buf, t, hp);
        }
    });

    Ok(StepStats {
        forward_passes: budgets.len(),
        backward_passes: 1,
        query_tokens: budgets.iter().map(|&(m, _)| (m * batch.len()) as u64).sum(),
        max_graph_budget: budgets.iter().map(|&(m, _)| m).max().unwrap(),
        losses: per_budget,
    })
}

/// Tail-drop step: sample one budget for the whole batch, forward only the
/// first m query tokens, one backward, one optimizer step.
pub fn train_step_mqt(
    model: &mut Model,
    batch: &[Sample],
    set: &TokenSet,
    budget_rng: &mut ChaCha8Rng,
    c_weight: &dyn Fn(usize) -> f64,
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<(usize, StepStats)> {
    let m = sample_budget(set, budget_rng);
    let stats = step_at_budgets(model, batch, &[(m, c_weight(m))], TrainScope::All, state, hp)?;
    Ok((m, stats))
}

/// Joint step: weighted losses over every budget in the set, one optimizer
/// step on the sum.
pub fn train_step_mrl(
    model: &mut Model,
    batch: &[Sample],
    set: &TokenSet,
    c_weight: &dyn Fn(usize) -> f64,
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<StepStats> {
    let budgets: Vec<(usize, f64)> = set.budgets.iter().map(|&m| (m, c_weight(m))).collect();
    step_at_budgets(model, batch, &budgets, TrainScope::All, state, hp)
}

/// Fixed-budget step: the conventional baseline.
pub fn train_step_fixed(
    model: &mut Model,
    batch: &[Sample],
    budget: usize,
    c_weight: &dyn Fn(usize) -> f64,
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<StepStats> {
    step_at_budgets(model, batch, &[(budget, c_weight(budget))], TrainScope::All, state, hp)
}

/// A trained model with its log.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
}

/// The two-stage schedule. Stage 1 trains the patch embedding, query bank,
/// and query transformer at the full budget (elastic when configured) with
/// the language model frozen; stage 2 unfreezes everything and applies the
/// configured regime.
pub fn train_two_stage(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::init(cfg.model, cfg.seed)?;
    let task = cfg.task_spec();
    let set = cfg.token_set()?;
    let full = cfg.model.max_tokens;
    let mut budget_rng = rng_for(cfg.seed, stream::BUDGET, 0);
    let mut log = TrainLog::new();
    let mut sample_cursor = 0u64;
    let c = |m: usize| cfg.c_weight(m);

    // stage 1
    let mut state = AdamState::new();
    let hp1 = AdamParams::with_lr(cfg.stage1_lr);
    for step in 0..cfg.stage1_steps {
        let batch = generate_dataset(&task, stream::TRAIN_DATA, sample_cursor, cfg.batch_size);
        sample_cursor += cfg.batch_size as u64;
        let m = if cfg.elastic_in_stage1 {
            sample_budget(&set, &mut budget_rng)
        } else {
            full
        };
        let stats = step_at_budgets(&mut model, &batch, &[(m, c(m))], TrainScope::Stage1, &mut state, &hp1)?;
        log.push(step, 1, cfg.regime, m, stats.losses[0].1, stats.query_tokens);
    }

    // stage 2
    let mut state = AdamState::new();
    let hp2 = AdamParams::with_lr(cfg.stage2_lr);
    for i in 0..cfg.stage2_steps {
        let step = cfg.stage1_steps + i;
        let batch = generate_dataset(&task, stream::TRAIN_DATA, sample_cursor, cfg.batch_size);
        sample_cursor += cfg.batch_size as u64;
        match cfg.regime {
            Regime::Mqt => {
                let (m, stats) =
                    train_step_mqt(&mut model, &batch, &set, &mut budget_rng, &c, &mut state, &hp2)?;
                log.push(step, 2, cfg.regime, m, stats.losses[0].1, stats.query_tokens);
            }
            Regime::Mrl => {
                let stats = train_step_mrl(&mut model, &batch, &set, &c, &mut state, &hp2)?;
                for &(m, loss) in &stats.losses {
                    log.push(step, 2, cfg.regime, m, loss, (m * batch.len()) as u64);
                }
            }
            Regime::Fixed => {
                let b = cfg.fixed_budget.unwrap_or(full);
                let stats = train_step_fixed(&mut model, &batch, b, &c, &mut state, &hp2)?;
                log.push(step, 2, cfg.regime, b, stats.losses[0].1, stats.query_tokens);
            }
        }
    }

    Ok(TrainOutcome { model, log })
}

// ── Evaluation ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetAccuracy {
    pub budget: usize,
    pub accuracy: f64,
    pub n: usize,
}

/// Exact-match accuracy at each requested budget over a frozen model.
/// Budgets outside the training set — odd ones included — are fine; anything
/// outside 1..=M is a budget error. Samples are evaluated in parallel when
/// the `parallel` feature is on; counts are integers, so the result is
/// independent of scheduling.
pub fn evaluate_sweep(
    model: &Model,
    data: &[Sample],
    budgets: &[usize],
) -> Result<Vec<BudgetAccuracy>> {
    let max = model.cfg.max_tokens;
    for &b in budgets {
        if b < 1 || b > max {
            return Err(Error::Budget { budget: b, max });
        }
    }
    if data.is_empty() {
        return Err(Error::Config("empty evaluation dataset".into()));
    }
    let mut out = Vec::with_capacity(budgets.len());
    for &b in budgets {
        let results: Vec<Result<bool>> = crate::par::map_slice(data, |s| {
            Ok(predict(model, &s.image, s.qa.question_id, b)? == s.qa.answer)
        });
        let mut correct = 0usize;
        for r in results {
            if r? {
                correct += 1;
            }
        }
        out.push(BudgetAccuracy {
            budget: b,
            accuracy: correct as f64 / data.len() as f64,
            n: data.len(),
        });
    }
    Ok(out)
}
