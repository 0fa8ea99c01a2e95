//! Desk-scale stand-ins for the vision encoder and language model, so the
//! whole pipeline — image → grid features → query transformer → decoder →
//! answer — trains end to end.
//!
//! The "LM" is one pre-norm decoder block plus a classifier head over a small
//! answer vocabulary. The input sequence is `[visual tokens ; question
//! embedding ; readout]`; the causal mask lets the readout slot (last
//! position) see everything before it, and the answer logits are read there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qt::{
    attn_sublayer, encode_tape, ffn_sublayer, AttnIds, AttnWeights, GridFeatures, LatentQueryBank,
    QTParams, QtConfig, QtIds, QtOrdering, VisualTokens, INIT_STD, MASK_NEG,
};
use crate::rng::{mix_seed, rng_for, stream};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Dimensions and switches for the full toy pipeline. Serialized into config
/// files and checkpoint manifests; every field has a default so `{}` is the
/// toy preset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d_image_size")]
    pub image_size: usize,
    #[serde(default = "d_patch_size")]
    pub patch_size: usize,
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default = "d_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "d_dv")]
    pub d_v: usize,
    #[serde(default = "d_dq")]
    pub d_q: usize,
    #[serde(default = "d_dlm")]
    pub d_lm: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default)]
    pub ordering: QtOrdering,
    #[serde(default)]
    pub query_self_attention: bool,
    #[serde(default = "d_question_vocab")]
    pub question_vocab: usize,
    #[serde(default = "d_answer_classes")]
    pub answer_classes: usize,
}

fn d_image_size() -> usize {
    24
}
fn d_patch_size() -> usize {
    3
}
fn d_channels() -> usize {
    3
}
fn d_max_tokens() -> usize {
    32
}
fn d_dv() -> usize {
    32
}
fn d_dq() -> usize {
    32
}
fn d_dlm() -> usize {
    48
}
fn d_heads() -> usize {
    4
}
fn d_question_vocab() -> usize {
    4
}
fn d_answer_classes() -> usize {
    8
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: d_image_size(),
            patch_size: d_patch_size(),
            channels: d_channels(),
            max_tokens: d_max_tokens(),
            d_v: d_dv(),
            d_q: d_dq(),
            d_lm: d_dlm(),
            heads: d_heads(),
            ordering: QtOrdering::default(),
            query_self_attention: false,
            question_vocab: d_question_vocab(),
            answer_classes: d_answer_classes(),
        }
    }
}

impl ModelConfig {
    /// The default desk-scale configuration: 24×24 images, 8×8 grid, 32
    /// latent tokens over 64 cells.
    pub fn toy() -> Self {
        ModelConfig::default()
    }

    /// A smaller configuration for gradient checks and fast tests.
    pub fn reduced() -> Self {
        ModelConfig {
            image_size: 12,
            patch_size: 3,
            channels: 3,
            max_tokens: 8,
            d_v: 8,
            d_q: 8,
            d_lm: 12,
            heads: 2,
            ordering: QtOrdering::default(),
            query_self_attention: false,
            question_vocab: 4,
            answer_classes: 4,
        }
    }

    pub fn qt(&self) -> QtConfig {
        QtConfig {
            max_tokens: self.max_tokens,
            d_v: self.d_v,
            d_q: self.d_q,
            d_lm: self.d_lm,
            heads: self.heads,
            ordering: self.ordering,
            query_self_attention: self.query_self_attention,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn grid_cells(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.question_vocab == 0 || self.answer_classes < 2 {
            return Err(Error::Config(
                "question vocab must be positive and answer classes at least 2".into(),
            ));
        }
        if self.d_lm % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_lm {} not divisible by {} heads",
                self.d_lm, self.heads
            )));
        }
        self.qt().validate()?;
        if self.max_tokens > self.grid_cells() {
            log::warn!(
                "max_tokens {} exceeds grid cells {}; the encoding no longer compresses",
                self.max_tokens,
                self.grid_cells()
            );
        }
        Ok(())
    }
}

/// An input image: C×H×W pixels in [0,1].
#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub pixels: Tensor,
}

impl SyntheticImage {
    pub fn new(pixels: Tensor) -> Result<Self> {
        if pixels.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "image must be C×H×W, got {:?}",
                pixels.shape()
            )));
        }
        Ok(SyntheticImage { pixels })
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// A question id from a tiny fixed vocabulary plus its answer class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionAnswer {
    pub question_id: usize,
    pub answer: usize,
}

/// Patch projection plus learned per-cell positional embeddings.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    /// (C·p·p) × d_v
    pub proj: Tensor,
    /// cells × d_v
    pub pos: Tensor,
}

impl PatchEmbed {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, stream::MODEL_INIT, 0);
        PatchEmbed {
            proj: Tensor::randn(vec![cfg.patch_dim(), cfg.d_v], INIT_STD, &mut rng)
                .with_requires_grad(),
            pos: Tensor::randn(vec![cfg.grid_cells(), cfg.d_v], INIT_STD, &mut rng)
                .with_requires_grad(),
        }
    }
}

/// The single decoder block plus embedding tables and classifier head.
#[derive(Debug, Clone)]
pub struct ToyLMParams {
    pub q_embed: Tensor,
    pub readout: Tensor,
    pub ln_attn_gain: Tensor,
    pub ln_attn_bias: Tensor,
    pub attn: AttnWeights,
    pub ln_ffn_gain: Tensor,
    pub ln_ffn_bias: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub final_ln_gain: Tensor,
    pub final_ln_bias: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ToyLMParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, stream::MODEL_INIT, 0);
        let d = cfg.d_lm;
        let hidden = 4 * d;
        let gain = |d: usize| Tensor::full(vec![d], 1.0).with_requires_grad();
        let bias = |d: usize| Tensor::zeros(vec![d]).with_requires_grad();
        ToyLMParams {
            q_embed: Tensor::randn(vec![cfg.question_vocab, d], INIT_STD, &mut rng)
                .with_requires_grad(),
            readout: Tensor::randn(vec![1, d], INIT_STD, &mut rng).with_requires_grad(),
            ln_attn_gain: gain(d),
            ln_attn_bias: bias(d),
            attn: AttnWeights::init(d, d, cfg.heads, &mut rng),
            ln_ffn_gain: gain(d),
            ln_ffn_bias: bias(d),
            ffn_w1: Tensor::randn(vec![d, hidden], INIT_STD, &mut rng).with_requires_grad(),
            ffn_b1: bias(hidden),
            ffn_w2: Tensor::randn(vec![hidden, d], INIT_STD, &mut rng).with_requires_grad(),
            ffn_b2: bias(d),
            final_ln_gain: gain(d),
            final_ln_bias: bias(d),
            head_w: Tensor::randn(vec![d, cfg.answer_classes], INIT_STD, &mut rng)
                .with_requires_grad(),
            head_b: bias(cfg.answer_classes),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("lm.q_embed".into(), &self.q_embed);
        f("lm.readout".into(), &self.readout);
        f("lm.ln_attn_gain".into(), &self.ln_attn_gain);
        f("lm.ln_attn_bias".into(), &self.ln_attn_bias);
        self.attn.visit("lm.attn", f);
        f("lm.ln_ffn_gain".into(), &self.ln_ffn_gain);
        f("lm.ln_ffn_bias".into(), &self.ln_ffn_bias);
        f("lm.ffn_w1".into(), &self.ffn_w1);
        f("lm.ffn_b1".into(), &self.ffn_b1);
        f("lm.ffn_w2".into(), &self.ffn_w2);
        f("lm.ffn_b2".into(), &self.ffn_b2);
        f("lm.final_ln_gain".into(), &self.final_ln_gain);
        f("lm.final_ln_bias".into(), &self.final_ln_bias);
        f("lm.head_w".into(), &self.head_w);
        f("lm.head_b".into(), &self.head_b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("lm.q_embed".into(), &mut self.q_embed);
        f("lm.readout".into(), &mut self.readout);
        f("lm.ln_attn_gain".into(), &mut self.ln_attn_gain);
        f("lm.ln_attn_bias".into(), &mut self.ln_attn_bias);
        self.attn.visit_mut("lm.attn", f);
        f("lm.ln_ffn_gain".into(), &mut self.ln_ffn_gain);
        f("lm.ln_ffn_bias".into(), &mut self.ln_ffn_bias);
        f("lm.ffn_w1".into(), &mut self.ffn_w1);
        f("lm.ffn_b1".into(), &mut self.ffn_b1);
        f("lm.ffn_w2".into(), &mut self.ffn_w2);
        f("lm.ffn_b2".into(), &mut self.ffn_b2);
        f("lm.final_ln_gain".into(), &mut self.final_ln_gain);
        f("lm.final_ln_bias".into(), &mut self.final_ln_bias);
        f("lm.head_w".into(), &mut self.head_w);
        f("lm.head_b".into(), &mut self.head_b);
    }
}

/// Which parameter groups a forward pass trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Everything trainable.
    All,
    /// First-stage alignment: patch embed, bank, and query transformer train;
    /// the language model stays frozen.
    Stage1,
    /// Evaluation: nothing trainable.
    Frozen,
}

impl TrainScope {
    fn lm_trainable(self) -> bool {
        matches!(self, TrainScope::All)
    }

    fn vision_trainable(self) -> bool {
        !matches!(self, TrainScope::Frozen)
    }
}

/// The full toy pipeline.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub patch: PatchEmbed,
    pub bank: LatentQueryBank,
    pub qt: QTParams,
    pub lm: ToyLMParams,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let patch = PatchEmbed::init(&cfg, mix_seed(&[seed, 1]));
        let bank = LatentQueryBank::init(cfg.max_tokens, cfg.d_q, mix_seed(&[seed, 2]))?;
        let qt = QTParams::init(cfg.qt(), mix_seed(&[seed, 3]))?;
        let lm = ToyLMParams::init(&cfg, mix_seed(&[seed, 4]));
        Ok(Model { cfg, patch, bank, qt, lm })
    }

    pub fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("patch.proj".into(), &self.patch.proj);
        f("patch.pos".into(), &self.patch.pos);
        f("bank.queries".into(), self.bank.queries());
        self.qt.visit("qt", f);
        self.lm.visit(f);
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("patch.proj".into(), &mut self.patch.proj);
        f("patch.pos".into(), &mut self.patch.pos);
        f("bank.queries".into(), self.bank.queries_mut());
        self.qt.visit_mut("qt", f);
        self.lm.visit_mut(f);
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_param(&mut |name, _| names.push(name));
        names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        let mut found = None;
        self.for_each_param(&mut |n, t| {
            if n == name {
                found = Some(t);
            }
        });
        found
    }

    /// Mutate one named parameter in place.
    pub fn with_param_mut(&mut self, name: &str, f: &mut dyn FnMut(&mut Tensor)) -> bool {
        let mut hit = false;
        self.for_each_param_mut(&mut |n, t| {
            if n == name {
                f(t);
                hit = true;
            }
        });
        hit
    }

    pub fn register(&self, tape: &mut Tape, scope: TrainScope) -> ModelIds {
        let vision = scope.vision_trainable();
        let lm = scope.lm_trainable();
        ModelIds {
            patch_proj: tape.leaf_with(&self.patch.proj, vision),
            patch_pos: tape.leaf_with(&self.patch.pos, vision),
            bank: tape.leaf_with(self.bank.queries(), vision),
            qt: self.qt.register(tape, vision),
            lm: LmIds::register(&self.lm, tape, lm),
        }
    }

    /// Copy gradients for all registered parameters out of the tape, keyed by
    /// parameter name. Parameters without gradients are omitted.
    pub fn collect_grads(
        &self,
        tape: &Tape,
        ids: &ModelIds,
    ) -> std::collections::HashMap<String, Vec<f64>> {
        let mut grads = std::collections::HashMap::new();
        ids.visit(&mut |name, id| {
            if let Some(g) = tape.grad(id) {
                grads.insert(name, g.to_vec());
            }
        });
        grads
    }
}

/// Tape ids for the language-model block.
#[derive(Debug, Clone)]
pub struct LmIds {
    pub q_embed: TensorId,
    pub readout: TensorId,
    pub ln_attn: (TensorId, TensorId),
    pub attn: AttnIds,
    pub ln_ffn: (TensorId, TensorId),
    pub ffn_w1: TensorId,
    pub ffn_b1: TensorId,
    pub ffn_w2: TensorId,
    pub ffn_b2: TensorId,
    pub final_ln: (TensorId, TensorId),
    pub head_w: TensorId,
    pub head_b: TensorId,
}

impl LmIds {
    fn register(p: &ToyLMParams, tape: &mut Tape, trainable: bool) -> Self {
        LmIds {
            q_embed: tape.leaf_with(&p.q_embed, trainable),
            readout: tape.leaf_with(&p.readout, trainable),
            ln_attn: (
                tape.leaf_with(&p.ln_attn_gain, trainable),
                tape.leaf_with(&p.ln_attn_bias, trainable),
            ),
            attn: p.attn.register(tape, trainable),
            ln_ffn: (
                tape.leaf_with(&p.ln_ffn_gain, trainable),
                tape.leaf_with(&p.ln_ffn_bias, trainable),
            ),
            ffn_w1: tape.leaf_with(&p.ffn_w1, trainable),
            ffn_b1: tape.leaf_with(&p.ffn_b1, trainable),
            ffn_w2: tape.leaf_with(&p.ffn_w2, trainable),
            ffn_b2: tape.leaf_with(&p.ffn_b2, trainable),
            final_ln: (
                tape.leaf_with(&p.final_ln_gain, trainable),
                tape.leaf_with(&p.final_ln_bias, trainable),
            ),
            head_w: tape.leaf_with(&p.head_w, trainable),
            head_b: tape.leaf_with(&p.head_b, trainable),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, TensorId)) {
        f("lm.q_embed".into(), self.q_embed);
        f("lm.readout".into(), self.readout);
        f("lm.ln_attn_gain".into(), self.ln_attn.0);
        f("lm.ln_attn_bias".into(), self.ln_attn.1);
        self.attn.visit("lm.attn", f);
        f("lm.ln_ffn_gain".into(), self.ln_ffn.0);
        f("lm.ln_ffn_bias".into(), self.ln_ffn.1);
        f("lm.ffn_w1".into(), self.ffn_w1);
        f("lm.ffn_b1".into(), self.ffn_b1);
        f("lm.ffn_w2".into(), self.ffn_w2);
        f("lm.ffn_b2".into(), self.ffn_b2);
        f("lm.final_ln_gain".into(), self.final_ln.0);
        f("lm.final_ln_bias".into(), self.final_ln.1);
        f("lm.head_w".into(), self.head_w);
        f("lm.head_b".into(), self.head_b);
    }
}

/// Tape ids for the whole model.
#[derive(Debug, Clone)]
pub struct ModelIds {
    pub patch_proj: TensorId,
    pub patch_pos: TensorId,
    pub bank: TensorId,
    pub qt: QtIds,
    pub lm: LmIds,
}

impl ModelIds {
    pub fn visit(&self, f: &mut dyn FnMut(String, TensorId)) {
        f("patch.proj".into(), self.patch_proj);
        f("patch.pos".into(), self.patch_pos);
        f("bank.queries".into(), self.bank);
        self.qt.visit("qt", f);
        self.lm.visit(f);
    }
}

// ── Forward passes ──────────────────────────────────────────────────

/// Rearrange an image into the (cells × patch_dim) gather matrix. Cells are
/// row-major over the grid; within a patch the layout is channel-major, then
/// pixel rows, then pixel columns.
pub fn patch_matrix(img: &SyntheticImage, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    if c != cfg.channels || h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Shape(format!(
            "image {:?} does not match configured {}×{}×{}",
            img.pixels.shape(),
            cfg.channels,
            cfg.image_size,
            cfg.image_size
        )));
    }
    let p = cfg.patch_size;
    let side = cfg.grid_side();
    let px = img.pixels.data();
    let mut out = Vec::with_capacity(cfg.grid_cells() * cfg.patch_dim());
    for gy in 0..side {
        for gx in 0..side {
            for ch in 0..c {
                for py in 0..p {
                    for qx in 0..p {
                        let y = gy * p + py;
                        let x = gx * p + qx;
                        out.push(px[ch * h * w + y * w + x]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Patch embedding on an existing tape; pixels enter as a constant.
pub fn patch_embed_tape(
    tape: &mut Tape,
    ids: &ModelIds,
    img: &SyntheticImage,
    cfg: &ModelConfig,
) -> Result<TensorId> {
    let gather = patch_matrix(img, cfg)?;
    let x = tape.constant(vec![cfg.grid_cells(), cfg.patch_dim()], gather)?;
    let projected = tape.matmul(x, ids.patch_proj)?;
    tape.add(projected, ids.patch_pos)
}

/// Non-overlapping patches linearly projected to d_v plus the learned
/// positional embedding per cell.
pub fn patch_embed(img: &SyntheticImage, patch: &PatchEmbed, cfg: &ModelConfig) -> Result<GridFeatures> {
    let mut tape = Tape::new();
    let gather = patch_matrix(img, cfg)?;
    let x = tape.constant(vec![cfg.grid_cells(), cfg.patch_dim()], gather)?;
    let proj = tape.leaf_with(&patch.proj, false);
    let pos = tape.leaf_with(&patch.pos, false);
    let projected = tape.matmul(x, proj)?;
    let out = tape.add(projected, pos)?;
    let features = Tensor::new(tape.shape(out).to_vec(), tape.data(out).to_vec())?;
    GridFeatures::new(features, cfg.grid_side(), cfg.grid_side())
}

fn causal_mask(tape: &mut Tape, n: usize) -> Result<TensorId> {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = MASK_NEG;
        }
    }
    tape.constant(vec![n, n], data)
}

/// Causal decoder over `[visual ; question ; readout]`; answer logits are read
/// at the readout position. Handles any visual budget, odd ones included.
pub fn decode_tape(
    tape: &mut Tape,
    lm: &LmIds,
    visual: TensorId,
    question_id: usize,
    cfg: &ModelConfig,
) -> Result<TensorId> {
    if question_id >= cfg.question_vocab {
        return Err(Error::Index(format!(
            "question id {question_id} out of range for vocab {}",
            cfg.question_vocab
        )));
    }
    let q_row = tape.slice_row(lm.q_embed, question_id)?;
    let seq = tape.concat_rows(&[visual, q_row, lm.readout])?;
    let n = tape.shape(seq)[0];
    let mask = causal_mask(tape, n)?;
    let head_dim = cfg.d_lm / cfg.heads;
    let (x, _) = attn_sublayer(tape, seq, None, lm.ln_attn, &lm.attn, head_dim, Some(mask))?;
    let x = ffn_sublayer(tape, x, lm.ln_ffn, lm.ffn_w1, lm.ffn_b1, lm.ffn_w2, lm.ffn_b2)?;
    let x = tape.layer_norm(x, lm.final_ln.0, lm.final_ln.1)?;
    let ro = tape.slice_row(x, n - 1)?;
    let logits = tape.matmul(ro, lm.head_w)?;
    let logits = tape.add_bias(logits, lm.head_b)?;
    tape.reshape(logits, vec![cfg.answer_classes])
}

/// Answer logits for pre-computed visual tokens with frozen parameters.
pub fn decode_answer(
    v: &VisualTokens,
    question_id: usize,
    lm: &ToyLMParams,
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    if !v.tokens.is_matrix() || v.tokens.cols() != cfg.d_lm {
        return Err(Error::Shape(format!(
            "visual tokens {:?} do not match d_lm {}",
            v.tokens.shape(),
            cfg.d_lm
        )));
    }
    let mut tape = Tape::new();
    let ids = LmIds::register(lm, &mut tape, false);
    let iv = tape.leaf_with(&v.tokens, false);
    let logits = decode_tape(&mut tape, &ids, iv, question_id, cfg)?;
    Ok(tape.data(logits).to_vec())
}

/// Scalar training loss for one sample at budget `m`, scaled by `c_m`.
pub fn forward_loss_tape(
    tape: &mut Tape,
    ids: &ModelIds,
    img: &SyntheticImage,
    qa: &QuestionAnswer,
    m: usize,
    c_m: f64,
    cfg: &ModelConfig,
) -> Result<TensorId> {
    let grid = patch_embed_tape(tape, ids, img, cfg)?;
    let qt_cfg = cfg.qt();
    let (visual, _) = encode_tape(tape, &ids.qt, ids.bank, grid, m, &qt_cfg)?;
    let logits = decode_tape(tape, &ids.lm, visual, qa.question_id, cfg)?;
    let loss = tape.cross_entropy(logits, qa.answer)?;
    tape.scale(loss, c_m)
}

/// Loss on frozen parameters (no gradients).
pub fn forward_loss(
    model: &Model,
    img: &SyntheticImage,
    qa: &QuestionAnswer,
    m: usize,
    c_m: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let ids = model.register(&mut tape, TrainScope::Frozen);
    let loss = forward_loss_tape(&mut tape, &ids, img, qa, m, c_m, &model.cfg)?;
    Ok(tape.scalar(loss))
}

/// Predicted answer class (argmax over logits, first maximum wins).
pub fn predict(model: &Model, img: &SyntheticImage, question_id: usize, m: usize) -> Result<usize> {
    let mut tape = Tape::new();
    let ids = model.register(&mut tape, TrainScope::Frozen);
    let grid = patch_embed_tape(&mut tape, &ids, img, &model.cfg)?;
    let qt_cfg = model.cfg.qt();
    let (visual, _) = encode_tape(&mut tape, &ids.qt, ids.bank, grid, m, &qt_cfg)?;
    let logits = decode_tape(&mut tape, &ids.lm, visual, question_id, &model.cfg)?;
    let data = tape.data(logits);
    let mut best = 0;
    for (i, &v) in data.iter().enumerate() {
        if v > data[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_rel_err;
    use crate::tape::Tape;

    fn random_image(cfg: &ModelConfig, seed: u64) -> SyntheticImage {
        let mut rng = rng_for(seed, stream::EVAL_DATA, 0);
        let n = cfg.channels * cfg.image_size * cfg.image_size;
        let data: Vec<f64> = (0..n)
            .map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0))
            .collect();
        SyntheticImage::new(
            Tensor::new(vec![cfg.channels, cfg.image_size, cfg.image_size], data).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn toy_patch_grid_is_8_by_8() {
        let cfg = ModelConfig::toy();
        let model = Model::init(cfg, 0).unwrap();
        let img = random_image(&cfg, 1);
        let grid = patch_embed(&img, &model.patch, &cfg).unwrap();
        assert_eq!(grid.h(), 8);
        assert_eq!(grid.w(), 8);
        assert_eq!(grid.features().shape(), &[64, 32]);
    }

    #[test]
    fn zero_image_features_equal_positional_embeddings() {
        let cfg = ModelConfig::reduced();
        let model = Model::init(cfg, 2).unwrap();
        let img = SyntheticImage::new(Tensor::zeros(vec![
            cfg.channels,
            cfg.image_size,
            cfg.image_size,
        ]))
        .unwrap();
        let grid = patch_embed(&img, &model.patch, &cfg).unwrap();
        assert_eq!(grid.features().data(), model.patch.pos.data());
    }

    #[test]
    fn patch_embed_rejects_indivisible_sizes() {
        let mut cfg = ModelConfig::reduced();
        cfg.image_size = 13;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn patch_embedding_weights_pass_gradient_check() {
        let cfg = ModelConfig::reduced();
        let model = Model::init(cfg, 3).unwrap();
        let img = random_image(&cfg, 4);
        let qa = QuestionAnswer { question_id: 1, answer: 2 };

        let mut tape = Tape::new();
        let ids = model.register(&mut tape, TrainScope::All);
        let loss = forward_loss_tape(&mut tape, &ids, &img, &qa, 4, 1.0, &cfg).unwrap();
        tape.backward(loss).unwrap();
        let grads = model.collect_grads(&tape, &ids);

        for name in ["patch.proj", "patch.pos"] {
            let analytic = grads.get(name).unwrap().clone();
            let base = model.param(name).unwrap().data().to_vec();
            let mut f = |v: &[f64]| {
                let mut m2 = model.clone();
                m2.with_param_mut(name, &mut |t| t.data_mut().copy_from_slice(v));
                forward_loss(&m2, &img, &qa, 4, 1.0).unwrap()
            };
            // spot-check a spread of indices
            let idx: Vec<usize> = (0..base.len()).step_by(base.len() / 7 + 1).collect();
            let err = max_rel_err(&mut f, &base, &analytic, 1e-5, &idx);
            assert!(err < 1e-5, "{name}: rel err {err}");
        }
    }

    #[test]
    fn decode_handles_elastic_budgets_including_odd() {
        let cfg = ModelConfig::toy();
        let model = Model::init(cfg, 5).unwrap();
        let img = random_image(&cfg, 6);
        let grid = patch_embed(&img, &model.patch, &cfg).unwrap();
        for m in [2usize, 7, 32] {
            let v = crate::qt::encode_image(&grid, &model.bank, m, &model.qt).unwrap();
            let logits = decode_answer(&v, 0, &model.lm, &cfg).unwrap();
            assert_eq!(logits.len(), cfg.answer_classes);
            assert!(logits.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn readout_sees_every_visual_token() {
        // causal mask places readout last, so perturbing any visual token must
        // move the logits
        let cfg = ModelConfig::reduced();
        let model = Model::init(cfg, 7).unwrap();
        let img = random_image(&cfg, 8);
        let grid = patch_embed(&img, &model.patch, &cfg).unwrap();
        let m = 5;
        let v = crate::qt::encode_image(&grid, &model.bank, m, &model.qt).unwrap();
        let base = decode_answer(&v, 0, &model.lm, &cfg).unwrap();
        for token in 0..m {
            let mut bumped = v.clone();
            bumped.tokens.data_mut()[token * cfg.d_lm] += 0.25;
            let out = decode_answer(&bumped, 0, &model.lm, &cfg).unwrap();
            assert_ne!(base, out, "perturbing token {token} left logits unchanged");
        }
    }

    #[test]
    fn zeroed_lm_with_head_bias_emits_the_bias() {
        let cfg = ModelConfig::reduced();
        let mut model = Model::init(cfg, 9).unwrap();
        model.lm.visit_mut(&mut |_, t| t.data_mut().fill(0.0));
        model
            .lm
            .head_b
            .data_mut()
            .copy_from_slice(&[0.5, -1.0, 2.0, 0.25]);
        let img = random_image(&cfg, 10);
        let grid = patch_embed(&img, &model.patch, &cfg).unwrap();
        let v = crate::qt::encode_image(&grid, &model.bank, 3, &model.qt).unwrap();
        let logits = decode_answer(&v, 1, &model.lm, &cfg).unwrap();
        assert_eq!(logits, vec![0.5, -1.0, 2.0, 0.25]);
    }

    #[test]
    fn untrained_loss_is_near_ln_k() {
        let cfg = ModelConfig::toy();
        let model = Model::init(cfg, 11).unwrap();
        let k = cfg.answer_classes as f64;
        let mut total = 0.0;
        let n = 200;
        for i in 0..n {
            let img = random_image(&cfg, 100 + i as u64);
            let qa = QuestionAnswer { question_id: 0, answer: (i * 7) % cfg.answer_classes };
            total += forward_loss(&model, &img, &qa, 16, 1.0).unwrap();
        }
        let mean = total / n as f64;
        assert!(
            (mean - k.ln()).abs() < 0.3,
            "mean untrained loss {mean} vs ln K {}",
            k.ln()
        );
    }

    #[test]
    fn zero_weight_yields_zero_loss_and_zero_gradients() {
        let cfg = ModelConfig::reduced();
        let model = Model::init(cfg, 12).unwrap();
        let img = random_image(&cfg, 13);
        let qa = QuestionAnswer { question_id: 0, answer: 1 };
        let mut tape = Tape::new();
        let ids = model.register(&mut tape, TrainScope::All);
        let loss = forward_loss_tape(&mut tape, &ids, &img, &qa, 4, 0.0, &cfg).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
        tape.backward(loss).unwrap();
        let grads = model.collect_grads(&tape, &ids);
        for (name, g) in &grads {
            assert!(g.iter().all(|&v| v == 0.0), "{name} has nonzero gradient");
        }
    }

    #[test]
    fn loss_is_finite_for_every_budget() {
        let cfg = ModelConfig::reduced();
        let model = Model::init(cfg, 14).unwrap();
        let img = random_image(&cfg, 15);
        let qa = QuestionAnswer { question_id: 2, answer: 0 };
        for m in 1..=cfg.max_tokens {
            let loss = forward_loss(&model, &img, &qa, m, 1.0).unwrap();
            assert!(loss.is_finite(), "budget {m} produced {loss}");
        }
    }

    #[test]
    fn loss_is_deterministic_for_fixed_seed() {
        let run = || {
            let cfg = ModelConfig::reduced();
            let model = Model::init(cfg, 16).unwrap();
            let img = random_image(&cfg, 17);
            let qa = QuestionAnswer { question_id: 0, answer: 3 };
            forward_loss(&model, &img, &qa, 6, 1.0).unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn stage1_scope_freezes_lm_gradients() {
        let cfg = ModelConfig::reduced();
        let model = Model::init(cfg, 18).unwrap();
        let img = random_image(&cfg, 19);
        let qa = QuestionAnswer { question_id: 0, answer: 1 };
        let mut tape = Tape::new();
        let ids = model.register(&mut tape, TrainScope::Stage1);
        let loss = forward_loss_tape(&mut tape, &ids, &img, &qa, 4, 1.0, &cfg).unwrap();
        tape.backward(loss).unwrap();
        let grads = model.collect_grads(&tape, &ids);
        assert!(grads.keys().any(|k| k.starts_with("qt.")));
        assert!(grads.contains_key("bank.queries"));
        assert!(grads.contains_key("patch.proj"));
        assert!(
            !grads.keys().any(|k| k.starts_with("lm.")),
            "frozen LM must not receive gradients"
        );
    }

    #[test]
    fn every_registered_parameter_receives_a_gradient() {
        // guards the name wiring between params, ids, and gradient readback
        let cfg = ModelConfig::reduced();
        let model = Model::init(cfg, 20).unwrap();
        let img = random_image(&cfg, 21);
        let qa = QuestionAnswer { question_id: 1, answer: 2 };
        let mut tape = Tape::new();
        let ids = model.register(&mut tape, TrainScope::All);
        let loss = forward_loss_tape(&mut tape, &ids, &img, &qa, cfg.max_tokens, 1.0, &cfg).unwrap();
        tape.backward(loss).unwrap();
        let grads = model.collect_grads(&tape, &ids);
        for name in model.param_names() {
            assert!(grads.contains_key(&name), "no gradient for {name}");
        }
        assert_eq!(grads.len(), model.param_names().len());
    }
}
