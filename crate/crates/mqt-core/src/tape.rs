//! Define-by-run reverse-mode autodiff on a linear tape.
//!
//! Each forward pass records nodes in construction order, which is already a
//! topological order, so the backward pass is one reverse sweep that visits
//! every node exactly once. Leaves accumulate (sum) gradients across all uses.
//! The tape is rebuilt per forward pass; this keeps elastic shapes (a token
//! budget that changes every step) trivially correct.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

// tanh-form GELU; forward and backward use the same closed form so gradient
// checks are exact.
const GELU_COEF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    Scale { x: usize, c: f64 },
    PrefixRows { x: usize },
    SliceRow { x: usize, row: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    Reshape { x: usize },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize },
    Gelu { x: usize },
    CrossEntropy { logits: usize, target: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    matmul_macs: u64,
    backward_runs: usize,
}

// ── Raw matmul kernels ──────────────────────────────────────────────
// ikj order with contiguous inner loops so LLVM vectorizes them.

/// C[m×n] += A[m×k] · B[k×n]
fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += a_ip * bv;
            }
        }
    }
}

/// C[m×k] += A[m×n] · Bᵀ where B is [k×n]
fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut out[i * k..(i + 1) * k];
        for (p, c) in c_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            *c += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// C[k×n] += Aᵀ · B where A is [m×k], B is [m×n]
fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let c_row = &mut out[p * n..(p + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += a_ip * bv;
            }
        }
    }
}

fn gelu_forward(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_backward(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Softmax lanes along `axis`: element (o, j, i) sits at o·lane·inner + j·inner + i.
fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Multiply-accumulate count of all matmuls recorded so far.
    pub fn matmul_macs(&self) -> u64 {
        self.matmul_macs
    }

    pub fn backward_runs(&self) -> usize {
        self.backward_runs
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node { shape, data, grad: None, requires_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    /// Register an external tensor as a leaf, snapshotting its current values.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Leaf with an explicit trainability override (used to freeze groups).
    pub fn leaf_with(&mut self, t: &Tensor, requires_grad: bool) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), requires_grad, Op::Leaf)
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "constant: shape {shape:?} expects {expect} elements, got {}",
                data.len()
            )));
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn check_matrix(&self, id: TensorId, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::Shape(format!("{what}: expected 2-d tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ── Forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.check_matrix(a, "matmul lhs")?;
        let (k2, n) = self.check_matrix(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions disagree, lhs {:?} vs rhs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        self.matmul_macs += (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.check_matrix(x, "transpose")?;
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, r], out, rg, Op::Transpose { x: x.0 }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: shapes disagree, {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, rg, Op::Add { a: a.0, b: b.0 }))
    }

    /// Broadcast a 1-d bias over the rows of a 2-d tensor.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (r, c) = self.check_matrix(x, "add_bias input")?;
        let bs = self.shape(bias);
        if bs.len() != 1 || bs[0] != c {
            return Err(Error::Shape(format!(
                "add_bias: bias {bs:?} does not match row width {c}"
            )));
        }
        let mut out = self.nodes[x.0].data.clone();
        let b = &self.nodes[bias.0].data;
        for row in out.chunks_exact_mut(c) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(vec![r, c], out, rg, Op::AddBias { x: x.0, bias: bias.0 }))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::Scale { x: x.0, c }))
    }

    /// First `rows` rows of a 2-d tensor. The backward pass scatters into the
    /// leading rows of the parent, so gradient flow targets shared storage.
    pub fn prefix_rows(&mut self, x: TensorId, rows: usize) -> Result<TensorId> {
        let (r, c) = self.check_matrix(x, "prefix_rows")?;
        if rows == 0 || rows > r {
            return Err(Error::Shape(format!(
                "prefix_rows: cannot take {rows} rows from {r}"
            )));
        }
        let out = self.nodes[x.0].data[..rows * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![rows, c], out, rg, Op::PrefixRows { x: x.0 }))
    }

    /// Single row of a 2-d tensor as a 1×c matrix.
    pub fn slice_row(&mut self, x: TensorId, row: usize) -> Result<TensorId> {
        let (r, c) = self.check_matrix(x, "slice_row")?;
        if row >= r {
            return Err(Error::Index(format!("slice_row: row {row} of {r}")));
        }
        let out = self.nodes[x.0].data[row * c..(row + 1) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![1, c], out, rg, Op::SliceRow { x: x.0, row }))
    }

    /// Stack 2-d tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows: no parts".into()));
        }
        let (_, c) = self.check_matrix(parts[0], "concat_rows part")?;
        let mut rows = 0;
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let (r, pc) = self.check_matrix(p, "concat_rows part")?;
            if pc != c {
                return Err(Error::Shape(format!(
                    "concat_rows: column mismatch, {c} vs {pc}"
                )));
            }
            rows += r;
            data.extend_from_slice(&self.nodes[p.0].data);
            rg |= self.rg(p);
        }
        Ok(self.push(
            vec![rows, c],
            data,
            rg,
            Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() },
        ))
    }

    /// Stack 2-d tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: no parts".into()));
        }
        let (r, _) = self.check_matrix(parts[0], "concat_cols part")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        let mut rg = false;
        for &p in parts {
            let (pr, pc) = self.check_matrix(p, "concat_cols part")?;
            if pr != r {
                return Err(Error::Shape(format!("concat_cols: row mismatch, {r} vs {pr}")));
            }
            widths.push(pc);
            total += pc;
            rg |= self.rg(p);
        }
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.nodes[p.0].data;
            for i in 0..r {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(
            vec![r, total],
            data,
            rg,
            Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() },
        ))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let expect: usize = shape.iter().product();
        if expect != self.nodes[x.0].data.len() {
            return Err(Error::Shape(format!(
                "reshape: {:?} -> {shape:?} changes element count",
                self.shape(x)
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.rg(x);
        Ok(self.push(shape, data, rg, Op::Reshape { x: x.0 }))
    }

    /// Numerically stable softmax along `axis` (max subtraction per lane).
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Index(format!(
                "softmax: axis {axis} of shape {shape:?}"
            )));
        }
        let (outer, lane, inner) = axis_strides(&shape, axis);
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..lane {
                    max = max.max(src[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..lane {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..lane {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::Softmax { x: x.0, axis }))
    }

    /// Normalize the last axis to zero mean / unit variance, then apply the
    /// per-feature affine (gain, bias).
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| Error::Shape("layer_norm: 0-d input".into()))?;
        let gs = self.shape(gain);
        let bs = self.shape(bias);
        if gs != [d] || bs != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: affine shapes {gs:?}/{bs:?} do not match feature dim {d}"
            )));
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = vec![0.0; src.len()];
        for (row, orow) in src.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, (v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                *o = (v - mean) * inv * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(shape, out, rg, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0 }))
    }

    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| gelu_forward(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::Gelu { x: x.0 }))
    }

    /// Negative log-softmax probability of `target` for a 1-d logit vector.
    pub fn cross_entropy(&mut self, logits: TensorId, target: usize) -> Result<TensorId> {
        let s = self.shape(logits);
        if s.len() != 1 {
            return Err(Error::Shape(format!("cross_entropy: expected 1-d logits, got {s:?}")));
        }
        let k = s[0];
        if target >= k {
            return Err(Error::Index(format!(
                "cross_entropy: target {target} out of range for {k} classes"
            )));
        }
        let x = &self.nodes[logits.0].data;
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - x[target];
        let rg = self.rg(logits);
        Ok(self.push(vec![1], vec![loss], rg, Op::CrossEntropy { logits: logits.0, target }))
    }

    // ── Backward ────────────────────────────────────────────────────

    fn add_grad(&mut self, p: usize, contrib: &[f64]) {
        let node = &mut self.nodes[p];
        if !node.requires_grad {
            return;
        }
        let g = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
        for (gv, &cv) in g.iter_mut().zip(contrib) {
            *gv += cv;
        }
    }

    fn add_grad_range(&mut self, p: usize, offset: usize, contrib: &[f64]) {
        let node = &mut self.nodes[p];
        if !node.requires_grad {
            return;
        }
        let g = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
        for (gv, &cv) in g[offset..offset + contrib.len()].iter_mut().zip(contrib) {
            *gv += cv;
        }
    }

    /// Reverse sweep from a scalar root. Each node is visited once, in reverse
    /// topological (construction) order.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(Error::Shape(format!(
                "backward: root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        self.backward_runs += 1;
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        {
            let root_node = &mut self.nodes[root.0];
            root_node.grad.get_or_insert_with(|| vec![0.0; 1])[0] += 1.0;
        }
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.nodes[i].grad.take() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let n = self.nodes[b].shape[1];
                    if self.nodes[a].requires_grad {
                        let mut da = vec![0.0; m * k];
                        matmul_nt_acc(&gy, &self.nodes[b].data, m, n, k, &mut da);
                        self.add_grad(a, &da);
                    }
                    if self.nodes[b].requires_grad {
                        let mut db = vec![0.0; k * n];
                        matmul_tn_acc(&self.nodes[a].data, &gy, m, k, n, &mut db);
                        self.add_grad(b, &db);
                    }
                }
                Op::Transpose { x } => {
                    let (r, c) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                    let mut dx = vec![0.0; r * c];
                    for i2 in 0..c {
                        for j in 0..r {
                            dx[j * c + i2] = gy[i2 * r + j];
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::Add { a, b } => {
                    self.add_grad(a, &gy);
                    self.add_grad(b, &gy);
                }
                Op::AddBias { x, bias } => {
                    self.add_grad(x, &gy);
                    if self.nodes[bias].requires_grad {
                        let c = self.nodes[bias].data.len();
                        let mut db = vec![0.0; c];
                        for row in gy.chunks_exact(c) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.add_grad(bias, &db);
                    }
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = gy.iter().map(|v| v * c).collect();
                    self.add_grad(x, &dx);
                }
                Op::PrefixRows { x } => {
                    self.add_grad_range(x, 0, &gy);
                }
                Op::SliceRow { x, row } => {
                    let c = self.nodes[x].shape[1];
                    self.add_grad_range(x, row * c, &gy);
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p].data.len();
                        let chunk = gy[off..off + len].to_vec();
                        self.add_grad(p, &chunk);
                        off += len;
                    }
                }
                Op::ConcatCols { parts } => {
                    let r = self.nodes[i].shape[0];
                    let total = self.nodes[i].shape[1];
                    let mut off = 0;
                    for p in parts {
                        let w = self.nodes[p].shape[1];
                        if self.nodes[p].requires_grad {
                            let mut dp = vec![0.0; r * w];
                            for row in 0..r {
                                dp[row * w..(row + 1) * w]
                                    .copy_from_slice(&gy[row * total + off..row * total + off + w]);
                            }
                            self.add_grad(p, &dp);
                        }
                        off += w;
                    }
                }
                Op::Reshape { x } => {
                    self.add_grad(x, &gy);
                }
                Op::Softmax { x, axis } => {
                    let shape = self.nodes[i].shape.clone();
                    let (outer, lane, inner) = axis_strides(&shape, axis);
                    let y = &self.nodes[i].data;
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i2 in 0..inner {
                            let base = o * lane * inner + i2;
                            let mut dot = 0.0;
                            for j in 0..lane {
                                let idx = base + j * inner;
                                dot += gy[idx] * y[idx];
                            }
                            for j in 0..lane {
                                let idx = base + j * inner;
                                dx[idx] = y[idx] * (gy[idx] - dot);
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let d = *self.nodes[i].shape.last().unwrap();
                    let src = &self.nodes[x].data;
                    let g = &self.nodes[gain].data;
                    let n = src.len();
                    let mut dx = vec![0.0; n];
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (r, row) in src.chunks_exact(d).enumerate() {
                        let gy_row = &gy[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        // xhat_j = (x_j - mean) * inv
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = gy_row[j] * g[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            dg[j] += gy_row[j] * xhat;
                            db[j] += gy_row[j];
                        }
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = gy_row[j] * g[j];
                            dx[r * d + j] = inv
                                * (dxhat - sum_dxhat / d as f64 - xhat * sum_dxhat_xhat / d as f64);
                        }
                    }
                    self.add_grad(x, &dx);
                    self.add_grad(gain, &dg);
                    self.add_grad(bias, &db);
                }
                Op::Gelu { x } => {
                    let dx: Vec<f64> = self.nodes[x]
                        .data
                        .iter()
                        .zip(&gy)
                        .map(|(&v, &gv)| gv * gelu_backward(v))
                        .collect();
                    self.add_grad(x, &dx);
                }
                Op::CrossEntropy { logits, target } => {
                    let x = &self.nodes[logits].data;
                    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = x.iter().map(|v| (v - max).exp()).sum();
                    let g0 = gy[0];
                    let dx: Vec<f64> = x
                        .iter()
                        .enumerate()
                        .map(|(j, v)| {
                            let p = (v - max).exp() / sum;
                            g0 * (p - if j == target { 1.0 } else { 0.0 })
                        })
                        .collect();
                    self.add_grad(logits, &dx);
                }
            }
            self.nodes[i].grad = Some(gy);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_err, rel_err};
    use crate::rng::{rng_for, stream};
    use crate::tensor::Tensor;

    fn randn(shape: Vec<usize>, seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut rng_for(seed, stream::MODEL_INIT, 0)).with_requires_grad()
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let a = randn(vec![3, 3], 1);
        let eye = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let zero = Tensor::zeros(vec![3, 3]);

        let mut tape = Tape::new();
        let ia = tape.leaf(&a);
        let ie = tape.leaf(&eye);
        let iz = tape.leaf(&zero);
        let ai = tape.matmul(ia, ie).unwrap();
        let az = tape.matmul(ia, iz).unwrap();
        assert_eq!(tape.data(ai), a.data());
        assert!(tape.data(az).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![3, 4]);
        let b = Tensor::zeros(vec![5, 2]);
        let mut tape = Tape::new();
        let ia = tape.leaf(&a);
        let ib = tape.leaf(&b);
        let err = tape.matmul(ia, ib).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 4]") && msg.contains("[5, 2]"), "{msg}");
    }

    // Scalar loss used by the matmul/elementwise gradient checks below: the
    // weighted sum over entries makes every gradient component generic.
    fn weighted_sum(tape: &Tape, id: TensorId) -> f64 {
        tape.data(id)
            .iter()
            .enumerate()
            .map(|(i, v)| (i as f64 * 0.37 + 0.5) * v)
            .sum()
    }

    fn weight(i: usize) -> f64 {
        i as f64 * 0.37 + 0.5
    }

    /// Backward against a fixed linear functional of the output: seeds the
    /// output grad via an explicit weighted contraction built from tape ops.
    fn contract_and_backward(tape: &mut Tape, out: TensorId) -> f64 {
        let n = tape.data(out).len();
        let cols = *tape.shape(out).last().unwrap();
        let rows = n / cols;
        let w: Vec<f64> = (0..n).map(weight).collect();
        // sum_i w_i * out_i  ==  ones[1×rows] · (out ⊙ w reshaped)  — build it
        // from primitives: flatten via reshape, then weighted-sum by matmul.
        let flat = tape.reshape(out, vec![1, n]).unwrap();
        let wmat = tape.constant(vec![n, 1], w).unwrap();
        let s = tape.matmul(flat, wmat).unwrap();
        let s = tape.reshape(s, vec![1]).unwrap();
        tape.backward(s).unwrap();
        let _ = rows;
        tape.scalar(s)
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        // random 3×4 · 4×2, both operands checked at fp64 with eps 1e-5
        let a = randn(vec![3, 4], 11);
        let b = randn(vec![4, 2], 12);

        let mut tape = Tape::new();
        let ia = tape.leaf(&a);
        let ib = tape.leaf(&b);
        let c = tape.matmul(ia, ib).unwrap();
        contract_and_backward(&mut tape, c);
        let ga = tape.grad(ia).unwrap().to_vec();
        let gb = tape.grad(ib).unwrap().to_vec();

        let mut fa = |x: &[f64]| {
            let at = Tensor::new(vec![3, 4], x.to_vec()).unwrap();
            let mut t = Tape::new();
            let ia = t.leaf(&at);
            let ib = t.leaf(&b);
            let c = t.matmul(ia, ib).unwrap();
            weighted_sum(&t, c)
        };
        let err_a = max_rel_err(&mut fa, a.data(), &ga, 1e-5, &[]);
        assert!(err_a < 1e-6, "dA rel err {err_a}");

        let mut fb = |x: &[f64]| {
            let bt = Tensor::new(vec![4, 2], x.to_vec()).unwrap();
            let mut t = Tape::new();
            let ia = t.leaf(&a);
            let ib = t.leaf(&bt);
            let c = t.matmul(ia, ib).unwrap();
            weighted_sum(&t, c)
        };
        let err_b = max_rel_err(&mut fb, b.data(), &gb, 1e-5, &[]);
        assert!(err_b < 1e-6, "dB rel err {err_b}");
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let x = Tensor::full(vec![6], 3.25);
        let mut tape = Tape::new();
        let ix = tape.leaf(&x);
        let s = tape.softmax(ix, 0).unwrap();
        for &v in tape.data(s) {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let x = Tensor::new(vec![3], vec![1000.0, 0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let ix = tape.leaf(&x);
        let s = tape.softmax(ix, 0).unwrap();
        let out = tape.data(s);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!(out[1].abs() < 1e-12 && out[2].abs() < 1e-12);
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let x = randn(vec![5], 21);
        let mut tape = Tape::new();
        let ix = tape.leaf(&x);
        let s = tape.softmax(ix, 0).unwrap();
        contract_and_backward(&mut tape, s);
        let gx = tape.grad(ix).unwrap().to_vec();

        let mut f = |v: &[f64]| {
            let xt = Tensor::new(vec![5], v.to_vec()).unwrap();
            let mut t = Tape::new();
            let ix = t.leaf(&xt);
            let s = t.softmax(ix, 0).unwrap();
            weighted_sum(&t, s)
        };
        let err = max_rel_err(&mut f, x.data(), &gx, 1e-5, &[]);
        assert!(err < 1e-6, "softmax grad rel err {err}");
    }

    #[test]
    fn softmax_rows_of_matrix_normalize() {
        let x = randn(vec![4, 7], 22);
        let mut tape = Tape::new();
        let ix = tape.leaf(&x);
        let s = tape.softmax(ix, 1).unwrap();
        for row in tape.data(s).chunks_exact(7) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        for k in [2usize, 5, 8] {
            let x = Tensor::full(vec![k], 0.7);
            let mut tape = Tape::new();
            let ix = tape.leaf(&x);
            let l = tape.cross_entropy(ix, k - 1).unwrap();
            assert!((tape.scalar(l) - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_confident_logits_drive_loss_to_zero() {
        let mut x = Tensor::zeros(vec![4]);
        x.data_mut()[2] = 20.0;
        let mut tape = Tape::new();
        let ix = tape.leaf(&x);
        let l = tape.cross_entropy(ix, 2).unwrap();
        let loss = tape.scalar(l);
        assert!(loss > 0.0 && loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let x = Tensor::zeros(vec![4]);
        let mut tape = Tape::new();
        let ix = tape.leaf(&x);
        assert!(matches!(tape.cross_entropy(ix, 4), Err(Error::Index(_))));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let x = randn(vec![6], 31);
        let target = 2;
        let mut tape = Tape::new();
        let ix = tape.leaf(&x);
        let l = tape.cross_entropy(ix, target).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(ix).unwrap().to_vec();

        // closed form
        let sm_id = {
            let mut t = Tape::new();
            let ix = t.leaf(&x);
            let s = t.softmax(ix, 0).unwrap();
            t.data(s).to_vec()
        };
        for j in 0..6 {
            let expect = sm_id[j] - if j == target { 1.0 } else { 0.0 };
            assert!(rel_err(g[j], expect) < 1e-12);
        }

        // and against finite differences
        let mut f = |v: &[f64]| {
            let xt = Tensor::new(vec![6], v.to_vec()).unwrap();
            let mut t = Tape::new();
            let ix = t.leaf(&xt);
            let l = t.cross_entropy(ix, target).unwrap();
            t.scalar(l)
        };
        let err = max_rel_err(&mut f, x.data(), &g, 1e-5, &[]);
        assert!(err < 1e-6, "CE grad rel err {err}");
    }

    #[test]
    fn layer_norm_of_constant_vector_returns_bias() {
        // degenerate variance is guarded by eps, so the normalized part is 0
        let x = Tensor::full(vec![2, 5], 4.0);
        let gain = Tensor::full(vec![5], 1.3);
        let bias = Tensor::new(vec![5], vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let mut tape = Tape::new();
        let ix = tape.leaf(&x);
        let ig = tape.leaf(&gain);
        let ib = tape.leaf(&bias);
        let y = tape.layer_norm(ix, ig, ib).unwrap();
        for row in tape.data(y).chunks_exact(5) {
            for (v, b) in row.iter().zip(bias.data()) {
                assert!((v - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let x = randn(vec![3, 6], 41);
        let gain = randn(vec![6], 42);
        let bias = randn(vec![6], 43);
        let mut tape = Tape::new();
        let ix = tape.leaf(&x);
        let ig = tape.leaf(&gain);
        let ib = tape.leaf(&bias);
        let y = tape.layer_norm(ix, ig, ib).unwrap();
        contract_and_backward(&mut tape, y);
        let gx = tape.grad(ix).unwrap().to_vec();
        let gg = tape.grad(ig).unwrap().to_vec();
        let gb = tape.grad(ib).unwrap().to_vec();

        let eval = |xv: &[f64], gv: &[f64], bv: &[f64]| {
            let xt = Tensor::new(vec![3, 6], xv.to_vec()).unwrap();
            let gt = Tensor::new(vec![6], gv.to_vec()).unwrap();
            let bt = Tensor::new(vec![6], bv.to_vec()).unwrap();
            let mut t = Tape::new();
            let ix = t.leaf(&xt);
            let ig = t.leaf(&gt);
            let ib = t.leaf(&bt);
            let y = t.layer_norm(ix, ig, ib).unwrap();
            weighted_sum(&t, y)
        };
        let mut fx = |v: &[f64]| eval(v, gain.data(), bias.data());
        assert!(max_rel_err(&mut fx, x.data(), &gx, 1e-5, &[]) < 1e-6);
        let mut fg = |v: &[f64]| eval(x.data(), v, bias.data());
        assert!(max_rel_err(&mut fg, gain.data(), &gg, 1e-5, &[]) < 1e-6);
        let mut fb = |v: &[f64]| eval(x.data(), gain.data(), v);
        assert!(max_rel_err(&mut fb, bias.data(), &gb, 1e-5, &[]) < 1e-6);
    }

    #[test]
    fn gelu_fixes_zero_and_checks_gradient() {
        assert_eq!(gelu_forward(0.0), 0.0);
        let x = randn(vec![9], 51);
        let mut tape = Tape::new();
        let ix = tape.leaf(&x);
        let y = tape.gelu(ix).unwrap();
        contract_and_backward(&mut tape, y);
        let gx = tape.grad(ix).unwrap().to_vec();
        let mut f = |v: &[f64]| {
            let xt = Tensor::new(vec![9], v.to_vec()).unwrap();
            let mut t = Tape::new();
            let ix = t.leaf(&xt);
            let y = t.gelu(ix).unwrap();
            weighted_sum(&t, y)
        };
        assert!(max_rel_err(&mut f, x.data(), &gx, 1e-5, &[]) < 1e-6);
    }

    #[test]
    fn composite_ops_pass_gradient_checks() {
        // add_bias, scale, transpose, prefix_rows, slice_row, concat_{rows,cols}
        // wired into one graph and checked against finite differences.
        let x = randn(vec![4, 3], 61);
        let b = randn(vec![3], 62);

        let build = |xv: &[f64], bv: &[f64]| -> (Tape, TensorId, TensorId, TensorId) {
            let xt = Tensor::new(vec![4, 3], xv.to_vec()).unwrap().with_requires_grad();
            let bt = Tensor::new(vec![3], bv.to_vec()).unwrap().with_requires_grad();
            let mut t = Tape::new();
            let ix = t.leaf(&xt);
            let ib = t.leaf(&bt);
            let biased = t.add_bias(ix, ib).unwrap();
            let scaled = t.scale(biased, 0.7).unwrap();
            let tr = t.transpose(scaled).unwrap(); // 3×4
            let pre = t.prefix_rows(tr, 2).unwrap(); // 2×4
            let row = t.slice_row(pre, 1).unwrap(); // 1×4
            let cat = t.concat_rows(&[pre, row]).unwrap(); // 3×4
            let side = t.concat_cols(&[cat, cat]).unwrap(); // 3×8
            let g = t.gelu(side).unwrap();
            (t, ix, ib, g)
        };

        let (mut tape, ix, ib, out) = build(x.data(), b.data());
        contract_and_backward(&mut tape, out);
        let gx = tape.grad(ix).unwrap().to_vec();
        let gb = tape.grad(ib).unwrap().to_vec();

        let mut fx = |v: &[f64]| {
            let (t, _, _, out) = build(v, b.data());
            weighted_sum(&t, out)
        };
        assert!(max_rel_err(&mut fx, x.data(), &gx, 1e-5, &[]) < 1e-6);
        let mut fb = |v: &[f64]| {
            let (t, _, _, out) = build(x.data(), v);
            weighted_sum(&t, out)
        };
        assert!(max_rel_err(&mut fb, b.data(), &gb, 1e-5, &[]) < 1e-6);
    }

    #[test]
    fn shared_leaf_accumulates_sum_of_gradients() {
        // w used twice: loss = sum(w·a) + sum(w·b); grad must equal the sum of
        // the single-use gradients.
        let w = randn(vec![2, 2], 71);
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![-1.0, 0.5, 2.0, -3.0]).unwrap();

        let single = |mat: &Tensor| {
            let mut t = Tape::new();
            let iw = t.leaf(&w);
            let im = t.leaf(mat);
            let p = t.matmul(iw, im).unwrap();
            contract_and_backward(&mut t, p);
            t.grad(iw).unwrap().to_vec()
        };
        let ga = single(&a);
        let gb = single(&b);

        let mut t = Tape::new();
        let iw = t.leaf(&w);
        let ia = t.leaf(&a);
        let ib = t.leaf(&b);
        let pa = t.matmul(iw, ia).unwrap();
        let pb = t.matmul(iw, ib).unwrap();
        let s = t.add(pa, pb).unwrap();
        contract_and_backward(&mut t, s);
        let g_both = t.grad(iw).unwrap();

        for i in 0..4 {
            assert!(rel_err(g_both[i], ga[i] + gb[i]) < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let x = randn(vec![6, 6], 81);
            let w = randn(vec![6, 6], 82);
            let g = Tensor::full(vec![6], 1.0);
            let b = Tensor::zeros(vec![6]);
            let mut t = Tape::new();
            let ix = t.leaf(&x);
            let iw = t.leaf(&w);
            let ig = t.leaf(&g);
            let ib = t.leaf(&b);
            let h = t.matmul(ix, iw).unwrap();
            let n = t.layer_norm(h, ig, ib).unwrap();
            let s = t.softmax(n, 1).unwrap();
            t.data(s).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "identical seeds must produce bit-identical outputs");
    }

    #[test]
    fn ops_keep_finite_values_on_finite_inputs() {
        // property-style sweep over 100 seeds with adversarial magnitudes
        for seed in 0..100 {
            let mut rng = rng_for(seed, stream::MODEL_INIT, 7);
            let x = Tensor::randn(vec![3, 5], 100.0, &mut rng);
            let g = Tensor::randn(vec![5], 1.0, &mut rng);
            let b = Tensor::randn(vec![5], 1.0, &mut rng);
            let mut t = Tape::new();
            let ix = t.leaf(&x);
            let ig = t.leaf(&g);
            let ib = t.leaf(&b);
            let n = t.layer_norm(ix, ig, ib).unwrap();
            let s = t.softmax(n, 1).unwrap();
            let e = t.gelu(s).unwrap();
            assert!(t.data(e).iter().all(|v| v.is_finite()), "seed {seed}");
        }
    }

    #[test]
    fn randomized_gradient_checks_over_100_seeds() {
        // invariant: max relative gradient error < 1e-5 across random seeds
        let mut worst: f64 = 0.0;
        for seed in 0..100u64 {
            let x = Tensor::randn(
                vec![2, 4],
                1.0,
                &mut rng_for(seed, stream::MODEL_INIT, 1),
            )
            .with_requires_grad();
            let w = Tensor::randn(
                vec![4, 3],
                1.0,
                &mut rng_for(seed, stream::MODEL_INIT, 2),
            )
            .with_requires_grad();

            let build = |xv: &[f64], wv: &[f64]| {
                let xt = Tensor::new(vec![2, 4], xv.to_vec()).unwrap().with_requires_grad();
                let wt = Tensor::new(vec![4, 3], wv.to_vec()).unwrap().with_requires_grad();
                let mut t = Tape::new();
                let ix = t.leaf(&xt);
                let iw = t.leaf(&wt);
                let h = t.matmul(ix, iw).unwrap();
                let g = t.gelu(h).unwrap();
                let s = t.softmax(g, 1).unwrap();
                (t, ix, iw, s)
            };
            let (mut tape, ix, iw, out) = build(x.data(), w.data());
            contract_and_backward(&mut tape, out);
            let gx = tape.grad(ix).unwrap().to_vec();
            let gw = tape.grad(iw).unwrap().to_vec();

            let mut fx = |v: &[f64]| {
                let (t, _, _, out) = build(v, w.data());
                weighted_sum(&t, out)
            };
            worst = worst.max(max_rel_err(&mut fx, x.data(), &gx, 1e-5, &[]));
            let mut fw = |v: &[f64]| {
                let (t, _, _, out) = build(x.data(), v);
                weighted_sum(&t, out)
            };
            worst = worst.max(max_rel_err(&mut fw, w.data(), &gw, 1e-5, &[]));
        }
        assert!(worst < 1e-5, "worst rel err over 100 seeds: {worst}");
    }

    #[test]
    fn backward_counts_and_macs_are_tracked() {
        let a = randn(vec![2, 3], 91);
        let b = randn(vec![3, 4], 92);
        let mut t = Tape::new();
        let ia = t.leaf(&a);
        let ib = t.leaf(&b);
        let c = t.matmul(ia, ib).unwrap();
        assert_eq!(t.matmul_macs(), 24);
        assert_eq!(t.backward_runs(), 0);
        contract_and_backward(&mut t, c);
        assert_eq!(t.backward_runs(), 1);
    }
}
