//! The matryoshka query transformer: a bank of learned latent query tokens,
//! prefix truncation to an elastic budget, one cross-attention layer over grid
//! features, and a projection into the language-model width.
//!
//! With the default configuration there is no attention among the query
//! tokens, so token `i` depends only on query row `i` and the grid. That makes
//! the nesting exact: the first `k` visual tokens at any budget `m ≥ k` are
//! bit-identical to the `k`-token encoding. Enabling `query_self_attention`
//! trades that exactness for token interaction.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Standard deviation for all randomly initialized weight matrices.
pub const INIT_STD: f64 = 0.02;

/// Additive mask value for disallowed attention positions. Finite so every
/// intermediate stays finite; far enough out that its softmax weight is 0.0.
pub const MASK_NEG: f64 = -1e30;

const FFN_EXPANSION: usize = 4;

/// Where the projection into the LM width sits relative to cross-attention.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum QtOrdering {
    /// Cross-attend in the query width, then project tokens up to `d_lm`.
    #[default]
    #[serde(rename = "attention-then-projection")]
    AttentionThenProjection,
    /// Project queries and grid into `d_lm` first, then cross-attend there.
    #[serde(rename = "projection-then-attention")]
    ProjectionThenAttention,
}

/// Dimensions and switches for the query transformer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QtConfig {
    /// Maximum number of latent query tokens (the bank size M).
    pub max_tokens: usize,
    /// Grid feature width coming out of the vision stub.
    pub d_v: usize,
    /// Latent query width.
    pub d_q: usize,
    /// Language-model hidden width the visual tokens are projected to.
    pub d_lm: usize,
    pub heads: usize,
    pub ordering: QtOrdering,
    pub query_self_attention: bool,
}

impl QtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens < 2 || self.max_tokens % 2 != 0 {
            return Err(Error::Config(format!(
                "max_tokens must be even and at least 2, got {}",
                self.max_tokens
            )));
        }
        for (name, v) in [
            ("d_v", self.d_v),
            ("d_q", self.d_q),
            ("d_lm", self.d_lm),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_work() % self.heads != 0 {
            return Err(Error::Config(format!(
                "working width {} not divisible by {} heads",
                self.d_work(),
                self.heads
            )));
        }
        Ok(())
    }

    /// Width the attention block runs in; depends on the ordering.
    pub fn d_work(&self) -> usize {
        match self.ordering {
            QtOrdering::AttentionThenProjection => self.d_q,
            QtOrdering::ProjectionThenAttention => self.d_lm,
        }
    }

    /// Width of the key/value source fed to cross-attention.
    pub fn kv_dim(&self) -> usize {
        match self.ordering {
            QtOrdering::AttentionThenProjection => self.d_v,
            QtOrdering::ProjectionThenAttention => self.d_lm,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_work() / self.heads
    }
}

// ── Domain types ────────────────────────────────────────────────────

/// The learned M×d_q query embeddings. Row order is part of model identity:
/// row i is latent token z_{i+1} and is never permuted after initialization.
#[derive(Debug, Clone)]
pub struct LatentQueryBank {
    queries: Tensor,
}

impl LatentQueryBank {
    /// Gaussian init (std 0.02), deterministic per seed.
    pub fn init(max_tokens: usize, d_q: usize, seed: u64) -> Result<Self> {
        if max_tokens < 2 || max_tokens % 2 != 0 {
            return Err(Error::Config(format!(
                "query bank needs an even token count of at least 2, got {max_tokens}"
            )));
        }
        if d_q == 0 {
            return Err(Error::Config("d_q must be positive".into()));
        }
        let mut rng = rng_for(seed, stream::MODEL_INIT, 0);
        let queries = Tensor::randn(vec![max_tokens, d_q], INIT_STD, &mut rng).with_requires_grad();
        Ok(LatentQueryBank { queries })
    }

    pub fn from_tensor(queries: Tensor) -> Result<Self> {
        if !queries.is_matrix() {
            return Err(Error::Shape(format!(
                "query bank must be 2-d, got {:?}",
                queries.shape()
            )));
        }
        Ok(LatentQueryBank { queries })
    }

    pub fn max_tokens(&self) -> usize {
        self.queries.rows()
    }

    pub fn d_q(&self) -> usize {
        self.queries.cols()
    }

    pub fn queries(&self) -> &Tensor {
        &self.queries
    }

    pub fn queries_mut(&mut self) -> &mut Tensor {
        &mut self.queries
    }
}

/// Flattened H×W patch features from the vision stub.
#[derive(Debug, Clone)]
pub struct GridFeatures {
    features: Tensor,
    h: usize,
    w: usize,
}

impl GridFeatures {
    pub fn new(features: Tensor, h: usize, w: usize) -> Result<Self> {
        if !features.is_matrix() || features.rows() != h * w {
            return Err(Error::Shape(format!(
                "grid features {:?} do not match {h}x{w} cells",
                features.shape()
            )));
        }
        Ok(GridFeatures { features, h, w })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn d_v(&self) -> usize {
        self.features.cols()
    }
}

/// Visual tokens handed to the language model: exactly `budget` rows.
#[derive(Debug, Clone)]
pub struct VisualTokens {
    pub tokens: Tensor,
    pub budget: usize,
}

/// Per-head attention projections plus the output mix.
#[derive(Debug, Clone)]
pub struct AttnWeights {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Tensor,
}

impl AttnWeights {
    /// `q_dim`/`kv_dim` are the input widths; heads × head_dim must equal `q_dim`.
    pub fn init(q_dim: usize, kv_dim: usize, heads: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let head_dim = q_dim / heads;
        let mk = |r: usize, c: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            Tensor::randn(vec![r, c], INIT_STD, rng).with_requires_grad()
        };
        AttnWeights {
            wq: (0..heads).map(|_| mk(q_dim, head_dim, rng)).collect(),
            wk: (0..heads).map(|_| mk(kv_dim, head_dim, rng)).collect(),
            wv: (0..heads).map(|_| mk(kv_dim, head_dim, rng)).collect(),
            wo: mk(q_dim, q_dim, rng),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, t) in self.wq.iter().enumerate() {
            f(format!("{prefix}.wq{i}"), t);
        }
        for (i, t) in self.wk.iter().enumerate() {
            f(format!("{prefix}.wk{i}"), t);
        }
        for (i, t) in self.wv.iter().enumerate() {
            f(format!("{prefix}.wv{i}"), t);
        }
        f(format!("{prefix}.wo"), &self.wo);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, t) in self.wq.iter_mut().enumerate() {
            f(format!("{prefix}.wq{i}"), t);
        }
        for (i, t) in self.wk.iter_mut().enumerate() {
            f(format!("{prefix}.wk{i}"), t);
        }
        for (i, t) in self.wv.iter_mut().enumerate() {
            f(format!("{prefix}.wv{i}"), t);
        }
        f(format!("{prefix}.wo"), &mut self.wo);
    }
}

/// Optional self-attention block among the query tokens (pre-norm).
#[derive(Debug, Clone)]
pub struct SelfAttnBlock {
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub attn: AttnWeights,
}

/// All learned weights of the query transformer layer.
#[derive(Debug, Clone)]
pub struct QTParams {
    pub cfg: QtConfig,
    pub ln_attn_gain: Tensor,
    pub ln_attn_bias: Tensor,
    pub cross: AttnWeights,
    pub ln_ffn_gain: Tensor,
    pub ln_ffn_bias: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    /// d_q → d_lm. Applied after attention by default, before it under the
    /// projection-then-attention ordering.
    pub proj: Tensor,
    /// d_v → d_lm; only present under projection-then-attention.
    pub grid_proj: Option<Tensor>,
    pub self_attn: Option<SelfAttnBlock>,
}

impl QTParams {
    pub fn init(cfg: QtConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, stream::MODEL_INIT, 0);
        let d = cfg.d_work();
        let hidden = FFN_EXPANSION * d;
        let gain = |d: usize| Tensor::full(vec![d], 1.0).with_requires_grad();
        let bias = |d: usize| Tensor::zeros(vec![d]).with_requires_grad();

        let self_attn = if cfg.query_self_attention {
            Some(SelfAttnBlock {
                ln_gain: gain(d),
                ln_bias: bias(d),
                attn: AttnWeights::init(d, d, cfg.heads, &mut rng),
            })
        } else {
            None
        };
        let cross = AttnWeights::init(d, cfg.kv_dim(), cfg.heads, &mut rng);
        let params = QTParams {
            cfg,
            ln_attn_gain: gain(d),
            ln_attn_bias: bias(d),
            cross,
            ln_ffn_gain: gain(d),
            ln_ffn_bias: bias(d),
            ffn_w1: Tensor::randn(vec![d, hidden], INIT_STD, &mut rng).with_requires_grad(),
            ffn_b1: bias(hidden),
            ffn_w2: Tensor::randn(vec![hidden, d], INIT_STD, &mut rng).with_requires_grad(),
            ffn_b2: bias(d),
            proj: Tensor::randn(vec![cfg.d_q, cfg.d_lm], INIT_STD, &mut rng).with_requires_grad(),
            grid_proj: match cfg.ordering {
                QtOrdering::ProjectionThenAttention => Some(
                    Tensor::randn(vec![cfg.d_v, cfg.d_lm], INIT_STD, &mut rng).with_requires_grad(),
                ),
                QtOrdering::AttentionThenProjection => None,
            },
            self_attn,
        };
        Ok(params)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(sa) = &self.self_attn {
            f(format!("{prefix}.sa.ln_gain"), &sa.ln_gain);
            f(format!("{prefix}.sa.ln_bias"), &sa.ln_bias);
            sa.attn.visit(&format!("{prefix}.sa"), f);
        }
        f(format!("{prefix}.ln_attn_gain"), &self.ln_attn_gain);
        f(format!("{prefix}.ln_attn_bias"), &self.ln_attn_bias);
        self.cross.visit(&format!("{prefix}.cross"), f);
        f(format!("{prefix}.ln_ffn_gain"), &self.ln_ffn_gain);
        f(format!("{prefix}.ln_ffn_bias"), &self.ln_ffn_bias);
        f(format!("{prefix}.ffn_w1"), &self.ffn_w1);
        f(format!("{prefix}.ffn_b1"), &self.ffn_b1);
        f(format!("{prefix}.ffn_w2"), &self.ffn_w2);
        f(format!("{prefix}.ffn_b2"), &self.ffn_b2);
        f(format!("{prefix}.proj"), &self.proj);
        if let Some(gp) = &self.grid_proj {
            f(format!("{prefix}.grid_proj"), gp);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(sa) = &mut self.self_attn {
            f(format!("{prefix}.sa.ln_gain"), &mut sa.ln_gain);
            f(format!("{prefix}.sa.ln_bias"), &mut sa.ln_bias);
            sa.attn.visit_mut(&format!("{prefix}.sa"), f);
        }
        f(format!("{prefix}.ln_attn_gain"), &mut self.ln_attn_gain);
        f(format!("{prefix}.ln_attn_bias"), &mut self.ln_attn_bias);
        self.cross.visit_mut(&format!("{prefix}.cross"), f);
        f(format!("{prefix}.ln_ffn_gain"), &mut self.ln_ffn_gain);
        f(format!("{prefix}.ln_ffn_bias"), &mut self.ln_ffn_bias);
        f(format!("{prefix}.ffn_w1"), &mut self.ffn_w1);
        f(format!("{prefix}.ffn_b1"), &mut self.ffn_b1);
        f(format!("{prefix}.ffn_w2"), &mut self.ffn_w2);
        f(format!("{prefix}.ffn_b2"), &mut self.ffn_b2);
        f(format!("{prefix}.proj"), &mut self.proj);
        if let Some(gp) = &mut self.grid_proj {
            f(format!("{prefix}.grid_proj"), gp);
        }
    }
}

// ── Tape-level building blocks ──────────────────────────────────────

/// Registered tape ids for one [`AttnWeights`].
#[derive(Debug, Clone)]
pub struct AttnIds {
    pub wq: Vec<TensorId>,
    pub wk: Vec<TensorId>,
    pub wv: Vec<TensorId>,
    pub wo: TensorId,
}

impl AttnWeights {
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> AttnIds {
        AttnIds {
            wq: self.wq.iter().map(|t| tape.leaf_with(t, trainable)).collect(),
            wk: self.wk.iter().map(|t| tape.leaf_with(t, trainable)).collect(),
            wv: self.wv.iter().map(|t| tape.leaf_with(t, trainable)).collect(),
            wo: tape.leaf_with(&self.wo, trainable),
        }
    }
}

impl AttnIds {
    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, TensorId)) {
        for (i, &t) in self.wq.iter().enumerate() {
            f(format!("{prefix}.wq{i}"), t);
        }
        for (i, &t) in self.wk.iter().enumerate() {
            f(format!("{prefix}.wk{i}"), t);
        }
        for (i, &t) in self.wv.iter().enumerate() {
            f(format!("{prefix}.wv{i}"), t);
        }
        f(format!("{prefix}.wo"), self.wo);
    }
}

/// Registered tape ids for [`QTParams`].
#[derive(Debug, Clone)]
pub struct QtIds {
    pub ln_attn: (TensorId, TensorId),
    pub cross: AttnIds,
    pub ln_ffn: (TensorId, TensorId),
    pub ffn_w1: TensorId,
    pub ffn_b1: TensorId,
    pub ffn_w2: TensorId,
    pub ffn_b2: TensorId,
    pub proj: TensorId,
    pub grid_proj: Option<TensorId>,
    pub self_attn: Option<((TensorId, TensorId), AttnIds)>,
}

impl QTParams {
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> QtIds {
        QtIds {
            self_attn: self.self_attn.as_ref().map(|sa| {
                (
                    (
                        tape.leaf_with(&sa.ln_gain, trainable),
                        tape.leaf_with(&sa.ln_bias, trainable),
                    ),
                    sa.attn.register(tape, trainable),
                )
            }),
            ln_attn: (
                tape.leaf_with(&self.ln_attn_gain, trainable),
                tape.leaf_with(&self.ln_attn_bias, trainable),
            ),
            cross: self.cross.register(tape, trainable),
            ln_ffn: (
                tape.leaf_with(&self.ln_ffn_gain, trainable),
                tape.leaf_with(&self.ln_ffn_bias, trainable),
            ),
            ffn_w1: tape.leaf_with(&self.ffn_w1, trainable),
            ffn_b1: tape.leaf_with(&self.ffn_b1, trainable),
            ffn_w2: tape.leaf_with(&self.ffn_w2, trainable),
            ffn_b2: tape.leaf_with(&self.ffn_b2, trainable),
            proj: tape.leaf_with(&self.proj, trainable),
            grid_proj: self.grid_proj.as_ref().map(|g| tape.leaf_with(g, trainable)),
        }
    }
}

impl QtIds {
    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, TensorId)) {
        if let Some((ln, attn)) = &self.self_attn {
            f(format!("{prefix}.sa.ln_gain"), ln.0);
            f(format!("{prefix}.sa.ln_bias"), ln.1);
            attn.visit(&format!("{prefix}.sa"), f);
        }
        f(format!("{prefix}.ln_attn_gain"), self.ln_attn.0);
        f(format!("{prefix}.ln_attn_bias"), self.ln_attn.1);
        self.cross.visit(&format!("{prefix}.cross"), f);
        f(format!("{prefix}.ln_ffn_gain"), self.ln_ffn.0);
        f(format!("{prefix}.ln_ffn_bias"), self.ln_ffn.1);
        f(format!("{prefix}.ffn_w1"), self.ffn_w1);
        f(format!("{prefix}.ffn_b1"), self.ffn_b1);
        f(format!("{prefix}.ffn_w2"), self.ffn_w2);
        f(format!("{prefix}.ffn_b2"), self.ffn_b2);
        f(format!("{prefix}.proj"), self.proj);
        if let Some(gp) = self.grid_proj {
            f(format!("{prefix}.grid_proj"), gp);
        }
    }
}

/// Multi-head attention with queries from `q_src` and keys/values from
/// `kv_src`, both already normalized as desired. Returns the mixed output and
/// the per-head attention probability nodes.
pub(crate) fn multi_head_attn(
    tape: &mut Tape,
    q_src: TensorId,
    kv_src: TensorId,
    ids: &AttnIds,
    head_dim: usize,
    mask: Option<TensorId>,
) -> Result<(TensorId, Vec<TensorId>)> {
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(ids.wq.len());
    let mut probs = Vec::with_capacity(ids.wq.len());
    for h in 0..ids.wq.len() {
        let q = tape.matmul(q_src, ids.wq[h])?;
        let k = tape.matmul(kv_src, ids.wk[h])?;
        let v = tape.matmul(kv_src, ids.wv[h])?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.scale(scores, scale)?;
        let masked = match mask {
            Some(m) => tape.add(scaled, m)?,
            None => scaled,
        };
        let p = tape.softmax(masked, 1)?;
        probs.push(p);
        outs.push(tape.matmul(p, v)?);
    }
    let cat = tape.concat_cols(&outs)?;
    let mixed = tape.matmul(cat, ids.wo)?;
    Ok((mixed, probs))
}

/// Pre-norm attention sublayer: x + MHA(LN(x), kv). `kv` of `None` attends the
/// normalized stream to itself.
pub(crate) fn attn_sublayer(
    tape: &mut Tape,
    x: TensorId,
    kv: Option<TensorId>,
    ln: (TensorId, TensorId),
    ids: &AttnIds,
    head_dim: usize,
    mask: Option<TensorId>,
) -> Result<(TensorId, Vec<TensorId>)> {
    let normed = tape.layer_norm(x, ln.0, ln.1)?;
    let kv_src = kv.unwrap_or(normed);
    let (attn, probs) = multi_head_attn(tape, normed, kv_src, ids, head_dim, mask)?;
    Ok((tape.add(x, attn)?, probs))
}

/// Pre-norm position-wise feed-forward sublayer with GELU.
pub(crate) fn ffn_sublayer(
    tape: &mut Tape,
    x: TensorId,
    ln: (TensorId, TensorId),
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
) -> Result<TensorId> {
    let normed = tape.layer_norm(x, ln.0, ln.1)?;
    let h = tape.matmul(normed, w1)?;
    let h = tape.add_bias(h, b1)?;
    let g = tape.gelu(h)?;
    let o = tape.matmul(g, w2)?;
    let o = tape.add_bias(o, b2)?;
    tape.add(x, o)
}

fn check_budget(m: usize, max: usize) -> Result<()> {
    if m < 1 || m > max {
        return Err(Error::Budget { budget: m, max });
    }
    Ok(())
}

/// Full query-transformer encoding on an existing tape. Returns the node
/// holding the m×d_lm visual tokens, plus the cross-attention probabilities
/// per head (m × cells each).
pub fn encode_tape(
    tape: &mut Tape,
    ids: &QtIds,
    bank_leaf: TensorId,
    grid_leaf: TensorId,
    m: usize,
    cfg: &QtConfig,
) -> Result<(TensorId, Vec<TensorId>)> {
    check_budget(m, cfg.max_tokens)?;
    let head_dim = cfg.head_dim();
    let q = tape.prefix_rows(bank_leaf, m)?;
    let (mut x, kv) = match cfg.ordering {
        QtOrdering::AttentionThenProjection => (q, grid_leaf),
        QtOrdering::ProjectionThenAttention => {
            let gp = ids.grid_proj.ok_or_else(|| {
                Error::Config("projection-then-attention needs a grid projection".into())
            })?;
            let xq = tape.matmul(q, ids.proj)?;
            let g = tape.matmul(grid_leaf, gp)?;
            (xq, g)
        }
    };
    if let Some((ln, sa)) = &ids.self_attn {
        let (sx, _) = attn_sublayer(tape, x, None, *ln, sa, head_dim, None)?;
        x = sx;
    }
    let (x2, probs) = attn_sublayer(tape, x, Some(kv), ids.ln_attn, &ids.cross, head_dim, None)?;
    let x3 = ffn_sublayer(
        tape, x2, ids.ln_ffn, ids.ffn_w1, ids.ffn_b1, ids.ffn_w2, ids.ffn_b2,
    )?;
    let out = match cfg.ordering {
        QtOrdering::AttentionThenProjection => tape.matmul(x3, ids.proj)?,
        QtOrdering::ProjectionThenAttention => x3,
    };
    Ok((out, probs))
}

// ── Standalone operations ───────────────────────────────────────────

/// First `m` rows of the bank. The returned tensor is a value snapshot; inside
/// a tape the same truncation is a `prefix_rows` view whose backward writes
/// straight into the bank's storage, so budget-m training touches only the
/// first m rows.
pub fn truncate_queries(bank: &LatentQueryBank, m: usize) -> Result<Tensor> {
    check_budget(m, bank.max_tokens())?;
    let d = bank.d_q();
    Tensor::new(vec![m, d], bank.queries().data()[..m * d].to_vec())
}

/// The cross-attention sublayer on frozen parameters: pre-norm queries,
/// multi-head attention over the grid, residual.
pub fn cross_attend(q: &Tensor, grid: &GridFeatures, params: &QTParams) -> Result<Tensor> {
    let cfg = &params.cfg;
    if !q.is_matrix() || q.cols() != cfg.d_work() {
        return Err(Error::Shape(format!(
            "queries {:?} do not match working width {}",
            q.shape(),
            cfg.d_work()
        )));
    }
    if grid.d_v() != cfg.kv_dim() {
        return Err(Error::Shape(format!(
            "grid width {} does not match key/value width {}",
            grid.d_v(),
            cfg.kv_dim()
        )));
    }
    let mut tape = Tape::new();
    let ids = params.register(&mut tape, false);
    let iq = tape.leaf(q);
    let ig = tape.leaf(grid.features());
    let (out, _) = attn_sublayer(
        &mut tape,
        iq,
        Some(ig),
        ids.ln_attn,
        &ids.cross,
        cfg.head_dim(),
        None,
    )?;
    Tensor::new(tape.shape(out).to_vec(), tape.data(out).to_vec())
}

/// Encode grid features into `m` visual tokens with frozen parameters.
pub fn encode_image(
    grid: &GridFeatures,
    bank: &LatentQueryBank,
    m: usize,
    params: &QTParams,
) -> Result<VisualTokens> {
    let cfg = &params.cfg;
    if grid.d_v() != cfg.d_v {
        return Err(Error::Shape(format!(
            "grid width {} does not match configured d_v {}",
            grid.d_v(),
            cfg.d_v
        )));
    }
    let mut tape = Tape::new();
    let ids = params.register(&mut tape, false);
    let ib = tape.leaf_with(bank.queries(), false);
    let ig = tape.leaf_with(grid.features(), false);
    let (out, _) = encode_tape(&mut tape, &ids, ib, ig, m, cfg)?;
    Ok(VisualTokens {
        tokens: Tensor::new(tape.shape(out).to_vec(), tape.data(out).to_vec())?,
        budget: m,
    })
}

/// Head-averaged cross-attention weights, one row per visual token.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub budget: usize,
    pub cells: usize,
    /// Row-major budget × cells, rows summing to 1.
    pub weights: Vec<f64>,
}

impl AttentionMap {
    /// CSV with header `token_index,cell_index,weight`.
    pub fn write_csv(&self, out: &mut dyn Write) -> std::io::Result<()> {
        out.write_all(b"token_index,cell_index,weight\n")?;
        for t in 0..self.budget {
            for c in 0..self.cells {
                writeln!(out, "{t},{c},{}", self.weights[t * self.cells + c])?;
            }
        }
        Ok(())
    }
}

/// Export the head-averaged attention map for one image at budget `m`.
pub fn export_attention(
    grid: &GridFeatures,
    bank: &LatentQueryBank,
    m: usize,
    params: &QTParams,
) -> Result<AttentionMap> {
    let cfg = &params.cfg;
    let mut tape = Tape::new();
    let ids = params.register(&mut tape, false);
    let ib = tape.leaf_with(bank.queries(), false);
    let ig = tape.leaf_with(grid.features(), false);
    let (_, probs) = encode_tape(&mut tape, &ids, ib, ig, m, cfg)?;
    let cells = grid.cells();
    let mut weights = vec![0.0; m * cells];
    let heads = probs.len() as f64;
    for p in &probs {
        for (w, &v) in weights.iter_mut().zip(tape.data(*p)) {
            *w += v / heads;
        }
    }
    Ok(AttentionMap { budget: m, cells, weights })
}
