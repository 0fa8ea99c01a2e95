//! Analytic multiply-accumulate cost model for the pipeline (query
//! transformer + language model) as a function of the visual-token budget.
//!
//! All counts are exact integers (FLOPs = 2 × MACs). The language-model
//! sequence length for budget m is m + T, where T is the text length (prompt
//! plus question tokens). The default T = 64 is the unique solution of
//! (576 + T) / (16 + T) = 8 in the linear-term limit, which simultaneously
//! lands (576+64)/(256+64) = 2.0 and (576+64)/(144+64) ≈ 3.08 — the 8x / 2x /
//! 3x speed-up ratios the model is asked to reproduce.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmDims {
    pub layers: u64,
    pub hidden: u64,
    pub ffn: u64,
    pub vocab: u64,
    /// Linear maps per FFN block: 3 for a gated FFN, 2 for a plain one.
    #[serde(default = "d_ffn_matrices")]
    pub ffn_matrices: u64,
    #[serde(default = "d_include_head")]
    pub include_head: bool,
}

fn d_ffn_matrices() -> u64 {
    3
}
fn d_include_head() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QtDims {
    pub d_q: u64,
    pub d_v: u64,
    pub grid_cells: u64,
    #[serde(default = "d_qt_layers")]
    pub layers: u64,
}

fn d_qt_layers() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineDims {
    pub lm: LmDims,
    pub qt: QtDims,
    /// Text tokens accompanying the visual tokens in the LM sequence.
    #[serde(default = "d_text_len")]
    pub text_len: u64,
}

fn d_text_len() -> u64 {
    64
}

impl PipelineDims {
    /// Dimensions in the class of a 7B decoder behind a 24×24-cell vision
    /// grid: 32 layers, width 4096, gated FFN 11008, vocab 32000.
    pub fn llava7b_like() -> Self {
        PipelineDims {
            lm: LmDims {
                layers: 32,
                hidden: 4096,
                ffn: 11008,
                vocab: 32000,
                ffn_matrices: 3,
                include_head: true,
            },
            qt: QtDims { d_q: 1024, d_v: 1024, grid_cells: 576, layers: 1 },
            text_len: 64,
        }
    }

    /// The desk-scale pipeline this crate trains.
    pub fn toy() -> Self {
        PipelineDims {
            lm: LmDims {
                layers: 1,
                hidden: 48,
                ffn: 192,
                vocab: 8,
                ffn_matrices: 2,
                include_head: true,
            },
            qt: QtDims { d_q: 32, d_v: 32, grid_cells: 64, layers: 1 },
            text_len: 2,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "llava7b-like" => Ok(Self::llava7b_like()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!(
                "unknown dims preset {other:?} (expected llava7b-like or toy)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lm.layers", self.lm.layers),
            ("lm.hidden", self.lm.hidden),
            ("lm.ffn", self.lm.ffn),
            ("lm.vocab", self.lm.vocab),
            ("lm.ffn_matrices", self.lm.ffn_matrices),
            ("qt.d_q", self.qt.d_q),
            ("qt.d_v", self.qt.d_v),
            ("qt.grid_cells", self.qt.grid_cells),
            ("qt.layers", self.qt.layers),
            ("text_len", self.text_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Language-model cost split for a sequence of `n_tokens`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LmCost {
    /// Per-layer QKVO projections and FFN: (8·n·d² + 2·matrices·n·d·ffn) × layers.
    pub linear: u64,
    /// The quadratic attention term: 4·n²·d × layers.
    pub quadratic: u64,
    /// Vocabulary head: 2·n·d·vocab, when counted.
    pub head: u64,
}

impl LmCost {
    pub fn total(&self) -> u64 {
        self.linear + self.quadratic + self.head
    }
}

/// Exact LM FLOPs for a sequence of `n_tokens`.
pub fn lm_flops(dims: &LmDims, n_tokens: u64) -> Result<LmCost> {
    if n_tokens == 0 {
        return Err(Error::Config("lm_flops needs at least one token".into()));
    }
    let n = n_tokens;
    let d = dims.hidden;
    let per_layer_linear = 8 * n * d * d + 2 * dims.ffn_matrices * n * d * dims.ffn;
    let per_layer_quadratic = 4 * n * n * d;
    Ok(LmCost {
        linear: per_layer_linear * dims.layers,
        quadratic: per_layer_quadratic * dims.layers,
        head: if dims.include_head { 2 * n * d * dims.vocab } else { 0 },
    })
}

/// Query-transformer cost split at budget `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QtCost {
    /// Cross-attention scores and mixing: 4·m·cells·d_q × layers.
    pub attention: u64,
    /// Query/key/value/output projections, the FFN, and the final projection
    /// into the LM width.
    pub projections: u64,
}

impl QtCost {
    pub fn total(&self) -> u64 {
        self.attention + self.projections
    }
}

/// Exact query-transformer FLOPs at budget `m`. Mirrors the matmul inventory
/// of the implementation exactly: q/o projections and the 4× FFN in the
/// working width, k/v projections from the grid, one final projection `d_q →
/// d_lm`, attention bilinear in m × cells.
pub fn qt_flops(dims: &QtDims, d_lm: u64, m: u64) -> Result<QtCost> {
    if m == 0 {
        return Err(Error::Budget { budget: 0, max: usize::MAX });
    }
    let g = dims.grid_cells;
    let dq = dims.d_q;
    // MACs per layer
    let q_proj = m * dq * dq;
    let kv_proj = 2 * g * dims.d_v * dq;
    let out_mix = m * dq * dq;
    let ffn = 8 * m * dq * dq;
    let attention_macs = 2 * m * g * dq;
    let final_proj = m * dq * d_lm;
    Ok(QtCost {
        attention: 2 * attention_macs * dims.layers,
        projections: 2 * ((q_proj + kv_proj + out_mix + ffn) * dims.layers + final_proj),
    })
}

/// Per-component FLOPs for the full pipeline at budget `m` (LM sequence
/// length m + T). The vision encoder is excluded: its cost does not vary
/// with the budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub budget: u64,
    pub qt_attention: u64,
    pub qt_projections: u64,
    pub lm_linear: u64,
    pub lm_attention_quadratic: u64,
    pub lm_head: u64,
    pub total: u64,
}

pub fn pipeline_report(dims: &PipelineDims, m: u64) -> Result<FlopsReport> {
    dims.validate()?;
    let qt = qt_flops(&dims.qt, dims.lm.hidden, m)?;
    let lm = lm_flops(&dims.lm, m + dims.text_len)?;
    Ok(FlopsReport {
        budget: m,
        qt_attention: qt.attention,
        qt_projections: qt.projections,
        lm_linear: lm.linear,
        lm_attention_quadratic: lm.quadratic,
        lm_head: lm.head,
        total: qt.total() + lm.total(),
    })
}

/// total_flops(m_high) / total_flops(m_low): the speed-up from running at
/// `m_low` instead of `m_high`.
pub fn speedup_ratio(dims: &PipelineDims, m_low: u64, m_high: u64) -> Result<f64> {
    let low = pipeline_report(dims, m_low)?;
    let high = pipeline_report(dims, m_high)?;
    Ok(high.total as f64 / low.total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubling_tokens_more_than_doubles_lm_flops() {
        let dims = PipelineDims::llava7b_like().lm;
        for n in [8u64, 64, 320, 576] {
            let once = lm_flops(&dims, n).unwrap().total();
            let twice = lm_flops(&dims, 2 * n).unwrap().total();
            assert!(
                twice > 2 * once,
                "n={n}: {twice} not strictly superlinear vs {once}"
            );
        }
    }

    #[test]
    fn single_layer_hand_calculation_matches() {
        // layers 1, d 2, ffn 4, 3 matrices, n 1:
        //   linear    = 8·1·2² + 2·3·1·2·4 = 32 + 48 = 80
        //   quadratic = 4·1²·2 = 8
        //   head      = 2·1·2·10 = 40
        let dims = LmDims {
            layers: 1,
            hidden: 2,
            ffn: 4,
            vocab: 10,
            ffn_matrices: 3,
            include_head: false,
        };
        let cost = lm_flops(&dims, 1).unwrap();
        assert_eq!(cost.linear, 80);
        assert_eq!(cost.quadratic, 8);
        assert_eq!(cost.head, 0);
        assert_eq!(cost.total(), 88);

        let with_head = LmDims { include_head: true, ..dims };
        assert_eq!(lm_flops(&with_head, 1).unwrap().total(), 128);
    }

    #[test]
    fn report_components_sum_to_total() {
        let dims = PipelineDims::llava7b_like();
        for m in [2u64, 16, 144, 256, 576] {
            let r = pipeline_report(&dims, m).unwrap();
            assert_eq!(
                r.total,
                r.qt_attention + r.qt_projections + r.lm_linear + r.lm_attention_quadratic + r.lm_head
            );
        }
    }

    #[test]
    fn qt_flops_are_affine_in_the_budget() {
        let dims = PipelineDims::llava7b_like().qt;
        let f = |m| qt_flops(&dims, 4096, m).unwrap().total();
        for m in [1u64, 7, 32, 100] {
            assert_eq!(f(2 * m) - f(m), f(3 * m) - f(2 * m), "not affine at m={m}");
        }
        assert!(qt_flops(&dims, 4096, 0).is_err());
    }

    #[test]
    fn paper_scale_ratios_fall_in_their_bands() {
        let dims = PipelineDims::llava7b_like();
        assert_eq!(dims.text_len, 64);
        let r16 = speedup_ratio(&dims, 16, 576).unwrap();
        let r144 = speedup_ratio(&dims, 144, 576).unwrap();
        let r256 = speedup_ratio(&dims, 256, 576).unwrap();
        assert!((7.0..=9.0).contains(&r16), "16 tokens: {r16}");
        assert!((2.7..=3.4).contains(&r144), "144 tokens: {r144}");
        assert!((1.8..=2.2).contains(&r256), "256 tokens: {r256}");
    }

    #[test]
    fn ratio_of_a_budget_with_itself_is_one() {
        let dims = PipelineDims::llava7b_like();
        assert_eq!(speedup_ratio(&dims, 144, 144).unwrap(), 1.0);
    }

    #[test]
    fn totals_increase_strictly_with_budget() {
        let dims = PipelineDims::llava7b_like();
        let mut prev = 0;
        for m in 1..=640 {
            let t = pipeline_report(&dims, m).unwrap().total;
            assert!(t > prev, "total did not grow at m={m}");
            prev = t;
        }
    }

    #[test]
    fn quadratic_share_stays_below_a_fifth_at_reference_dims() {
        let dims = PipelineDims::llava7b_like();
        for m in [2u64, 64, 256, 576] {
            let r = pipeline_report(&dims, m).unwrap();
            let share = r.lm_attention_quadratic as f64 / r.total as f64;
            assert!(share < 0.2, "m={m}: quadratic share {share}");
        }
    }

    #[test]
    fn default_text_length_solves_the_linear_limit_exactly() {
        // (576 + T) / (16 + T) = 8  ⇒  T = 64
        let t = 64.0;
        assert_eq!((576.0 + t) / (16.0 + t), 8.0);
        assert_eq!((576.0 + t) / (256.0 + t), 2.0);
        let r144 = (576.0 + t) / (144.0 + t);
        assert!((2.7..=3.4).contains(&r144));
    }

    #[test]
    fn instrumented_engine_macs_match_the_closed_form_exactly() {
        // count real matmul MACs of one toy encode and compare with qt_flops
        use crate::qt::{LatentQueryBank, QTParams};
        use crate::tape::Tape;
        use crate::tensor::Tensor;
        use crate::vlm::ModelConfig;

        let cfg = ModelConfig::toy();
        let params = QTParams::init(cfg.qt(), 1).unwrap();
        let bank = LatentQueryBank::init(cfg.max_tokens, cfg.d_q, 2).unwrap();
        let grid = Tensor::randn(
            vec![cfg.grid_cells(), cfg.d_v],
            1.0,
            &mut crate::rng::rng_for(3, crate::rng::stream::EVAL_DATA, 0),
        );
        let dims = PipelineDims::toy();
        for m in [1usize, 2, 7, 16, 32] {
            let mut tape = Tape::new();
            let ids = params.register(&mut tape, false);
            let ib = tape.leaf_with(bank.queries(), false);
            let ig = tape.leaf_with(&grid, false);
            crate::qt::encode_tape(&mut tape, &ids, ib, ig, m, &cfg.qt()).unwrap();
            let measured_flops = 2 * tape.matmul_macs();
            let predicted = qt_flops(&dims.qt, dims.lm.hidden, m as u64).unwrap().total();
            assert_eq!(measured_flops, predicted, "budget {m}");
        }
    }
}
