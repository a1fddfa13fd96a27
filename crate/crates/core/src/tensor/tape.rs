use std::cell::{Cell, RefCell};
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{
    bce_logit_scalar, gelu_grad_scalar, gelu_scalar, gemm, layer_norm_row, sigmoid_scalar,
    softmax_in_place, Transpose,
};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Location of a recorded value: which tape, which slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeRef {
    tape: u64,
    index: usize,
}

/// Keys visible to one query row, as ranges of rows of the packed QKV matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeySet(pub Vec<Range<usize>>);

impl KeySet {
    pub fn len(&self) -> usize {
        self.0.iter().map(|r| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().flat_map(|r| r.clone())
    }
}

/// Which keys each query row of a fused attention call may read.
///
/// Masking is expressed by restricting each query's key set, so excluded keys
/// never enter the score arithmetic at all.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    heads: usize,
    key_sets: Vec<KeySet>,
    /// Rows whose keys are interchangeable; their contributions are summed in
    /// an order fixed by their values rather than their positions.
    exchangeable: Vec<bool>,
}

impl AttentionLayout {
    pub fn new(heads: usize, key_sets: Vec<KeySet>) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Config("attention needs at least one head".into()));
        }
        let rows = key_sets.len();
        for (i, ks) in key_sets.iter().enumerate() {
            if ks.is_empty() {
                return Err(Error::Contract(format!("query {i} has an empty key set")));
            }
            if ks.0.iter().any(|r| r.end > rows || r.start > r.end) {
                return Err(Error::Contract(format!(
                    "query {i} key set {:?} exceeds {rows} rows",
                    ks.0
                )));
            }
        }
        Ok(AttentionLayout {
            heads,
            exchangeable: vec![false; rows],
            key_sets,
        })
    }

    /// Marks key rows in `ranges` as interchangeable, so permuting them
    /// permutes the outputs exactly.
    pub fn with_exchangeable(mut self, ranges: &[Range<usize>]) -> Result<Self> {
        for r in ranges {
            if r.end > self.rows() {
                return Err(Error::Contract(format!(
                    "exchangeable rows {r:?} exceed {} rows",
                    self.rows()
                )));
            }
            self.exchangeable[r.clone()].fill(true);
        }
        Ok(self)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn rows(&self) -> usize {
        self.key_sets.len()
    }

    pub fn key_set(&self, query: usize) -> &KeySet {
        &self.key_sets[query]
    }
}

/// Softmax attention weights from one fused attention call, per head and query.
#[derive(Clone, Debug)]
pub struct AttentionProbs {
    heads: usize,
    offsets: Vec<usize>,
    data: Vec<f64>,
}

impl AttentionProbs {
    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn queries(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Weights of `query` in `head`, ordered as the query's key set.
    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let per_head = self.offsets[self.offsets.len() - 1];
        let base = head * per_head;
        &self.data[base + self.offsets[query]..base + self.offsets[query + 1]]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRowBias { x: usize, bias: usize },
    Scale { x: usize, factor: f64 },
    Exp { x: usize },
    Log { x: usize },
    Sigmoid { x: usize },
    Gelu { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    SumLastDim { x: usize },
    Transpose { x: usize, rows: usize, cols: usize },
    Reshape { x: usize },
    ConcatRows { parts: Vec<usize> },
    SliceRows { x: usize, start: usize, end: usize },
    GatherRows { x: usize, index: Vec<usize> },
    RepeatRows { x: usize, times: usize },
    Softmax { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { qkv: usize, layout: Arc<AttentionLayout>, probs: Arc<AttentionProbs> },
    BceWithLogits { logits: usize, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
struct Inner {
    nodes: Vec<Node>,
    backward_done: bool,
    check_finite: bool,
}

/// Records one forward pass. Single-threaded; use one tape per concurrent pass.
#[derive(Debug)]
pub struct Tape {
    id: Cell<u64>,
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let node = t.node()?;
        if node.tape != self.tape {
            return None;
        }
        self.grads.get(node.index)?.as_deref()
    }

    /// Copies the gradient of `t` (if any) into its grad slot.
    pub fn populate(&self, t: &mut Tensor) {
        if let Some(g) = self.get(t) {
            t.grad = Some(g.to_vec());
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: Cell::new(fresh_id()),
            inner: RefCell::new(Inner::default()),
        }
    }

    /// Discards all recorded nodes. Tensors from before the reset can no longer be used here.
    pub fn reset(&mut self) {
        self.id.set(fresh_id());
        *self.inner.get_mut() = Inner {
            check_finite: self.inner.get_mut().check_finite,
            ..Inner::default()
        };
    }

    /// When set, any op producing a NaN fails with [`Error::Numeric`].
    pub fn set_check_finite(&self, on: bool) {
        self.inner.borrow_mut().check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers `t` as a leaf of this tape, keeping its `requires_grad` flag.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let index = self.push_leaf(&mut inner, t);
        Tensor::from_parts(t.shape().to_vec(), Arc::clone(t.shared_data())).attach(
            NodeRef {
                tape: self.id.get(),
                index,
            },
            t.requires_grad(),
        )
    }

    /// Registers a non-differentiable constant.
    pub fn constant(&self, t: &Tensor) -> Tensor {
        self.leaf(&t.detach())
    }

    fn push_leaf(&self, inner: &mut Inner, t: &Tensor) -> usize {
        inner.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Arc::clone(t.shared_data()),
            requires_grad: t.requires_grad(),
            op: Op::Leaf,
        });
        inner.nodes.len() - 1
    }

    fn resolve(&self, inner: &mut Inner, t: &Tensor) -> Result<usize> {
        match t.node() {
            Some(node) if node.tape == self.id.get() => Ok(node.index),
            Some(_) => Err(Error::Contract(
                "tensor was recorded on a different tape (or before a reset)".into(),
            )),
            None => Ok(self.push_leaf(inner, t)),
        }
    }

    fn record(
        &self,
        inner: &mut Inner,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        inputs: &[usize],
        op: Op,
    ) -> Result<Tensor> {
        if inner.check_finite && value.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric {
                op: op_name,
                detail: "produced NaN from the recorded inputs".into(),
            });
        }
        let requires_grad = inputs.iter().any(|&i| inner.nodes[i].requires_grad);
        let value = Arc::new(value);
        inner.nodes.push(Node {
            shape: shape.clone(),
            value: Arc::clone(&value),
            requires_grad,
            // Constant subgraphs need no backward bookkeeping.
            op: if requires_grad { op } else { Op::Leaf },
        });
        let node = NodeRef {
            tape: self.id.get(),
            index: inner.nodes.len() - 1,
        };
        Ok(Tensor::from_parts(shape, value).attach(node, requires_grad))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), Transpose::No, b.data(), Transpose::No, &mut out, 0.0)?;
        let mut inner = self.inner.borrow_mut();
        let ia = self.resolve(&mut inner, a)?;
        let ib = self.resolve(&mut inner, b)?;
        self.record(&mut inner, "matmul", vec![m, n], out, &[ia, ib], Op::MatMul { a: ia, b: ib, m, k, n })
    }

    pub fn transpose(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, cols) = x.dims2()?;
        let src = x.data();
        let mut out = vec![0.0; src.len()];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let mut inner = self.inner.borrow_mut();
        let ix = self.resolve(&mut inner, x)?;
        self.record(&mut inner, "transpose", vec![cols, rows], out, &[ix], Op::Transpose { x: ix, rows, cols })
    }

    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != x.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", x.shape(), shape));
        }
        let mut inner = self.inner.borrow_mut();
        let ix = self.resolve(&mut inner, x)?;
        self.record(&mut inner, "reshape", shape.to_vec(), x.data().to_vec(), &[ix], Op::Reshape { x: ix })
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &self,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape(name, a.shape(), b.shape()));
        }
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let mut inner = self.inner.borrow_mut();
        let ia = self.resolve(&mut inner, a)?;
        let ib = self.resolve(&mut inner, b)?;
        self.record(&mut inner, name, a.shape().to_vec(), out, &[ia, ib], op(ia, ib))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    /// `x + bias` with `bias` broadcast over rows; the only broadcast supported.
    pub fn add_row_bias(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let cols = x.last_dim();
        if bias.shape() != [cols] || x.shape().is_empty() {
            return Err(Error::shape("add_row_bias", x.shape(), bias.shape()));
        }
        let b = bias.data();
        let out = x
            .data()
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let mut inner = self.inner.borrow_mut();
        let ix = self.resolve(&mut inner, x)?;
        let ib = self.resolve(&mut inner, bias)?;
        self.record(&mut inner, "add_row_bias", x.shape().to_vec(), out, &[ix, ib], Op::AddRowBias { x: ix, bias: ib })
    }

    fn unary(
        &self,
        name: &'static str,
        x: &Tensor,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Tensor> {
        let out = x.data().iter().map(|&v| f(v)).collect();
        let mut inner = self.inner.borrow_mut();
        let ix = self.resolve(&mut inner, x)?;
        self.record(&mut inner, name, x.shape().to_vec(), out, &[ix], op(ix))
    }

    pub fn scale(&self, x: &Tensor, factor: f64) -> Result<Tensor> {
        self.unary("scale", x, |v| v * factor, |x| Op::Scale { x, factor })
    }

    pub fn exp(&self, x: &Tensor) -> Result<Tensor> {
        self.unary("exp", x, f64::exp, |x| Op::Exp { x })
    }

    pub fn log(&self, x: &Tensor) -> Result<Tensor> {
        self.unary("log", x, f64::ln, |x| Op::Log { x })
    }

    pub fn sigmoid(&self, x: &Tensor) -> Result<Tensor> {
        self.unary("sigmoid", x, sigmoid_scalar, |x| Op::Sigmoid { x })
    }

    /// Tanh-approximated gelu.
    pub fn gelu(&self, x: &Tensor) -> Result<Tensor> {
        self.unary("gelu", x, gelu_scalar, |x| Op::Gelu { x })
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.data().iter().sum();
        let mut inner = self.inner.borrow_mut();
        let ix = self.resolve(&mut inner, x)?;
        self.record(&mut inner, "sum", Vec::new(), vec![s], &[ix], Op::Sum { x: ix })
    }

    pub fn mean(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        let mut inner = self.inner.borrow_mut();
        let ix = self.resolve(&mut inner, x)?;
        self.record(&mut inner, "mean", Vec::new(), vec![s], &[ix], Op::Mean { x: ix })
    }

    /// Sums the last axis away: `[.., k] -> [..]` (a 1-D input becomes `[1]`).
    pub fn sum_lastdim(&self, x: &Tensor) -> Result<Tensor> {
        let k = x.last_dim();
        let out: Vec<f64> = x.data().chunks_exact(k).map(|r| r.iter().sum()).collect();
        let mut shape = x.shape()[..x.shape().len().saturating_sub(1)].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let mut inner = self.inner.borrow_mut();
        let ix = self.resolve(&mut inner, x)?;
        self.record(&mut inner, "sum_lastdim", shape, out, &[ix], Op::SumLastDim { x: ix })
    }

    // ---- row manipulation -----------------------------------------------

    pub fn concat_rows(&self, parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows needs at least one part".into()))?;
        let (_, cols) = first.dims2()?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(Error::shape("concat_rows", first.shape(), p.shape()));
            }
            rows += r;
            out.extend_from_slice(p.data());
        }
        let mut inner = self.inner.borrow_mut();
        let ids = parts
            .iter()
            .map(|p| self.resolve(&mut inner, p))
            .collect::<Result<Vec<_>>>()?;
        self.record(&mut inner, "concat_rows", vec![rows, cols], out, &ids, Op::ConcatRows { parts: ids.clone() })
    }

    pub fn slice_rows(&self, x: &Tensor, rows: Range<usize>) -> Result<Tensor> {
        let (n, cols) = x.dims2()?;
        if rows.start >= rows.end || rows.end > n {
            return Err(Error::Contract(format!(
                "slice_rows {rows:?} out of range for {n} rows"
            )));
        }
        let out = x.data()[rows.start * cols..rows.end * cols].to_vec();
        let mut inner = self.inner.borrow_mut();
        let ix = self.resolve(&mut inner, x)?;
        self.record(
            &mut inner,
            "slice_rows",
            vec![rows.len(), cols],
            out,
            &[ix],
            Op::SliceRows { x: ix, start: rows.start, end: rows.end },
        )
    }

    /// Selects rows by index (repeats allowed); gradients scatter-add back.
    pub fn gather_rows(&self, x: &Tensor, index: &[usize]) -> Result<Tensor> {
        let (n, cols) = x.dims2()?;
        if index.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!("gather_rows index {bad} out of range for {n} rows")));
        }
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            out.extend_from_slice(x.row(i));
        }
        let mut inner = self.inner.borrow_mut();
        let ix = self.resolve(&mut inner, x)?;
        self.record(
            &mut inner,
            "gather_rows",
            vec![index.len(), cols],
            out,
            &[ix],
            Op::GatherRows { x: ix, index: index.to_vec() },
        )
    }

    /// Stacks `times` copies of `x` vertically.
    pub fn repeat_rows(&self, x: &Tensor, times: usize) -> Result<Tensor> {
        let (rows, cols) = x.dims2()?;
        if times == 0 {
            return Err(Error::Contract("repeat_rows needs times >= 1".into()));
        }
        let out = x.data().repeat(times);
        let mut inner = self.inner.borrow_mut();
        let ix = self.resolve(&mut inner, x)?;
        self.record(&mut inner, "repeat_rows", vec![rows * times, cols], out, &[ix], Op::RepeatRows { x: ix, times })
    }

    // ---- fused neural-network ops --------------------------------------

    /// Softmax over the last axis with max subtraction. NaN input is an error.
    pub fn softmax_lastdim(&self, x: &Tensor) -> Result<Tensor> {
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric {
                op: "softmax_lastdim",
                detail: "input contains NaN".into(),
            });
        }
        let k = x.last_dim();
        let mut out = x.data().to_vec();
        out.chunks_exact_mut(k).for_each(softmax_in_place);
        let mut inner = self.inner.borrow_mut();
        let ix = self.resolve(&mut inner, x)?;
        self.record(&mut inner, "softmax_lastdim", x.shape().to_vec(), out, &[ix], Op::Softmax { x: ix })
    }

    /// Per-row normalization over the last axis followed by `gamma`, `beta`.
    pub fn layer_norm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = x.last_dim();
        if gamma.shape() != [d] || beta.shape() != [d] || x.shape().is_empty() {
            return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let rows = x.numel() / d;
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        for (r, (src, dst)) in x.data().chunks_exact(d).zip(xhat.chunks_exact_mut(d)).enumerate() {
            rstd[r] = layer_norm_row(src, eps, dst);
        }
        let (g, b) = (gamma.data(), beta.data());
        let out = xhat
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((h, gv), bv)| h * gv + bv))
            .collect();
        let mut inner = self.inner.borrow_mut();
        let ix = self.resolve(&mut inner, x)?;
        let ig = self.resolve(&mut inner, gamma)?;
        let ib = self.resolve(&mut inner, beta)?;
        self.record(
            &mut inner,
            "layer_norm",
            x.shape().to_vec(),
            out,
            &[ix, ig, ib],
            Op::LayerNorm { x: ix, gamma: ig, beta: ib, xhat, rstd },
        )
    }

    /// Multi-head scaled dot-product attention over a packed `[T × 3D]`
    /// query/key/value matrix (columns `Q | K | V`, each split into equal
    /// head slices). Each query row attends only to its key set in `layout`.
    /// Returns the concatenated head outputs `[T × D]` and the weights.
    pub fn attention(
        &self,
        qkv: &Tensor,
        layout: &Arc<AttentionLayout>,
    ) -> Result<(Tensor, Arc<AttentionProbs>)> {
        let (t, three_d) = qkv.dims2()?;
        let heads = layout.heads();
        if three_d % 3 != 0 || (three_d / 3) % heads != 0 {
            return Err(Error::Config(format!(
                "packed width {three_d} is not 3 x (heads={heads} x head width)"
            )));
        }
        if layout.rows() != t {
            return Err(Error::shape("attention", qkv.shape(), &[layout.rows()]));
        }
        let d = three_d / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = qkv.data();

        let mut offsets = Vec::with_capacity(t + 1);
        offsets.push(0);
        for i in 0..t {
            offsets.push(offsets[i] + layout.key_set(i).len());
        }
        let per_head = offsets[t];
        let mut probs = vec![0.0; heads * per_head];
        let mut out = vec![0.0; t * d];
        let mut keys = Vec::new();
        let mut order = Vec::new();

        for h in 0..heads {
            let qo = h * dh;
            let ko = d + h * dh;
            let vo = 2 * d + h * dh;
            for i in 0..t {
                let q = &src[i * three_d + qo..i * three_d + qo + dh];
                let p = &mut probs[h * per_head + offsets[i]..h * per_head + offsets[i + 1]];
                keys.clear();
                keys.extend(layout.key_set(i).iter());
                for (slot, &j) in p.iter_mut().zip(&keys) {
                    let k = &src[j * three_d + ko..j * three_d + ko + dh];
                    *slot = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let o = &mut out[i * d + qo..i * d + qo + dh];
                if keys.iter().all(|&j| !layout.exchangeable[j]) {
                    softmax_in_place(p);
                    for (&w, &j) in p.iter().zip(&keys) {
                        let v = &src[j * three_d + vo..j * three_d + vo + dh];
                        for (ov, vv) in o.iter_mut().zip(v) {
                            *ov += w * vv;
                        }
                    }
                    continue;
                }
                let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                p.iter_mut().for_each(|s| *s = (*s - max).exp());
                let value = |pos: usize| &src[keys[pos] * three_d + vo..keys[pos] * three_d + vo + dh];
                order.clear();
                order.extend((0..keys.len()).filter(|&pos| !layout.exchangeable[keys[pos]]));
                let fixed = order.len();
                order.extend((0..keys.len()).filter(|&pos| layout.exchangeable[keys[pos]]));
                order[fixed..].sort_by(|&a, &b| {
                    p[a].total_cmp(&p[b]).then_with(|| {
                        value(a)
                            .iter()
                            .zip(value(b))
                            .map(|(x, y)| x.total_cmp(y))
                            .find(|o| o.is_ne())
                            .unwrap_or(std::cmp::Ordering::Equal)
                    })
                });
                let sum: f64 = order.iter().map(|&pos| p[pos]).sum();
                p.iter_mut().for_each(|w| *w /= sum);
                for &pos in &order {
                    let w = p[pos];
                    for (ov, vv) in o.iter_mut().zip(value(pos)) {
                        *ov += w * vv;
                    }
                }
            }
        }

        let probs = Arc::new(AttentionProbs { heads, offsets, data: probs });
        let mut inner = self.inner.borrow_mut();
        let iq = self.resolve(&mut inner, qkv)?;
        let out = self.record(
            &mut inner,
            "attention",
            vec![t, d],
            out,
            &[iq],
            Op::Attention {
                qkv: iq,
                layout: Arc::clone(layout),
                probs: Arc::clone(&probs),
            },
        )?;
        Ok((out, probs))
    }

    /// Mean over all elements of the stable logit-space binary cross-entropy.
    pub fn bce_with_logits(&self, logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
        if logits.shape() != targets.shape() {
            return Err(Error::shape("bce_with_logits", logits.shape(), targets.shape()));
        }
        if let Some(bad) = targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::Contract(format!(
                "bce_with_logits targets must be 0 or 1, found {bad}"
            )));
        }
        let n = logits.numel() as f64;
        let loss = logits
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| bce_logit_scalar(z, t))
            .sum::<f64>()
            / n;
        let mut inner = self.inner.borrow_mut();
        let il = self.resolve(&mut inner, logits)?;
        self.record(
            &mut inner,
            "bce_with_logits",
            Vec::new(),
            vec![loss],
            &[il],
            Op::BceWithLogits {
                logits: il,
                targets: targets.data().to_vec(),
            },
        )
    }

    // ---- reverse pass ---------------------------------------------------

    /// Propagates from a scalar `loss` back to every reachable leaf that
    /// requires grad. A tape supports one backward pass until [`Tape::reset`].
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let mut inner = self.inner.borrow_mut();
        if inner.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it before another pass".into(),
            ));
        }
        let node = loss
            .node()
            .filter(|n| n.tape == self.id.get())
            .ok_or_else(|| Error::Contract("loss was not recorded on this tape".into()))?;
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        inner.backward_done = true;

        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[node.index].requires_grad {
            grads[node.index] = Some(vec![1.0]);
        }
        for i in (0..=node.index).rev() {
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, i, &g, &mut grads);
        }
        // Only leaf gradients survive; interior ones were consumed above.
        Ok(Gradients {
            tape: self.id.get(),
            grads,
        })
    }
}

fn accumulate<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    idx: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[idx].requires_grad {
        return None;
    }
    let len = nodes[idx].value.len();
    Some(grads[idx].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if let Some(da) = accumulate(nodes, grads, a) {
                gemm(m, n, k, g, Transpose::No, &nodes[b].value, Transpose::Yes, da, 1.0)
                    .expect("matmul backward shapes");
            }
            if let Some(db) = accumulate(nodes, grads, b) {
                gemm(k, m, n, &nodes[a].value, Transpose::Yes, g, Transpose::No, db, 1.0)
                    .expect("matmul backward shapes");
            }
        }
        &Op::Add { a, b } => {
            for idx in [a, b] {
                if let Some(d) = accumulate(nodes, grads, idx) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }
        &Op::Sub { a, b } => {
            if let Some(d) = accumulate(nodes, grads, a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = accumulate(nodes, grads, b) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
        }
        &Op::Mul { a, b } => {
            let (va, vb) = (Arc::clone(&nodes[a].value), Arc::clone(&nodes[b].value));
            if let Some(d) = accumulate(nodes, grads, a) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(vb.iter()) {
                    *d += g * y;
                }
            }
            if let Some(d) = accumulate(nodes, grads, b) {
                for ((d, g), x) in d.iter_mut().zip(g).zip(va.iter()) {
                    *d += g * x;
                }
            }
        }
        &Op::AddRowBias { x, bias } => {
            if let Some(d) = accumulate(nodes, grads, x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = accumulate(nodes, grads, bias) {
                let cols = d.len();
                for row in g.chunks_exact(cols) {
                    d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
        }
        &Op::Scale { x, factor } => {
            if let Some(d) = accumulate(nodes, grads, x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += factor * g);
            }
        }
        &Op::Exp { x } => {
            if let Some(d) = accumulate(nodes, grads, x) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out.iter()) {
                    *d += g * y;
                }
            }
        }
        &Op::Log { x } => {
            let vx = Arc::clone(&nodes[x].value);
            if let Some(d) = accumulate(nodes, grads, x) {
                for ((d, g), v) in d.iter_mut().zip(g).zip(vx.iter()) {
                    *d += g / v;
                }
            }
        }
        &Op::Sigmoid { x } => {
            if let Some(d) = accumulate(nodes, grads, x) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out.iter()) {
                    *d += g * y * (1.0 - y);
                }
            }
        }
        &Op::Gelu { x } => {
            let vx = Arc::clone(&nodes[x].value);
            if let Some(d) = accumulate(nodes, grads, x) {
                for ((d, g), v) in d.iter_mut().zip(g).zip(vx.iter()) {
                    *d += g * gelu_grad_scalar(*v);
                }
            }
        }
        &Op::Sum { x } => {
            if let Some(d) = accumulate(nodes, grads, x) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Mean { x } => {
            if let Some(d) = accumulate(nodes, grads, x) {
                let s = g[0] / d.len() as f64;
                d.iter_mut().for_each(|d| *d += s);
            }
        }
        &Op::SumLastDim { x } => {
            if let Some(d) = accumulate(nodes, grads, x) {
                let k = d.len() / g.len();
                for (row, gv) in d.chunks_exact_mut(k).zip(g) {
                    row.iter_mut().for_each(|d| *d += gv);
                }
            }
        }
        &Op::Transpose { x, rows, cols } => {
            if let Some(d) = accumulate(nodes, grads, x) {
                for r in 0..rows {
                    for c in 0..cols {
                        d[r * cols + c] += g[c * rows + r];
                    }
                }
            }
        }
        &Op::Reshape { x } => {
            if let Some(d) = accumulate(nodes, grads, x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(d) = accumulate(nodes, grads, p) {
                    d.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, g)| *d += g);
                }
                offset += len;
            }
        }
        &Op::SliceRows { x, start, end } => {
            if let Some(d) = accumulate(nodes, grads, x) {
                let cols = g.len() / (end - start);
                d[start * cols..end * cols]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, g)| *d += g);
            }
        }
        Op::GatherRows { x, index } => {
            if let Some(d) = accumulate(nodes, grads, *x) {
                let cols = g.len() / index.len();
                for (row, &src) in g.chunks_exact(cols).zip(index) {
                    d[src * cols..(src + 1) * cols]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(d, g)| *d += g);
                }
            }
        }
        &Op::RepeatRows { x, times } => {
            if let Some(d) = accumulate(nodes, grads, x) {
                let len = d.len();
                for t in 0..times {
                    d.iter_mut()
                        .zip(&g[t * len..(t + 1) * len])
                        .for_each(|(d, g)| *d += g);
                }
            }
        }
        &Op::Softmax { x } => {
            if let Some(d) = accumulate(nodes, grads, x) {
                let k = nodes[x].shape.last().copied().unwrap_or(1);
                for ((drow, grow), yrow) in d.chunks_exact_mut(k).zip(g.chunks_exact(k)).zip(out.chunks_exact(k)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (g - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let dim = nodes[*gamma].value.len();
            let gv = Arc::clone(&nodes[*gamma].value);
            if let Some(d) = accumulate(nodes, grads, *x) {
                let mut dxhat = vec![0.0; dim];
                for (r, ((drow, grow), hrow)) in d
                    .chunks_exact_mut(dim)
                    .zip(g.chunks_exact(dim))
                    .zip(xhat.chunks_exact(dim))
                    .enumerate()
                {
                    for ((dh, gg), gm) in dxhat.iter_mut().zip(grow).zip(gv.iter()) {
                        *dh = gg * gm;
                    }
                    let mean_dh = dxhat.iter().sum::<f64>() / dim as f64;
                    let mean_dh_h = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                    for ((dv, dh), h) in drow.iter_mut().zip(&dxhat).zip(hrow) {
                        *dv += rstd[r] * (dh - mean_dh - h * mean_dh_h);
                    }
                }
            }
            if let Some(d) = accumulate(nodes, grads, *gamma) {
                for (grow, hrow) in g.chunks_exact(dim).zip(xhat.chunks_exact(dim)) {
                    for ((d, gg), h) in d.iter_mut().zip(grow).zip(hrow) {
                        *d += gg * h;
                    }
                }
            }
            if let Some(d) = accumulate(nodes, grads, *beta) {
                for grow in g.chunks_exact(dim) {
                    d.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Attention { qkv, layout, probs } => {
            let src = Arc::clone(&nodes[*qkv].value);
            let Some(d) = accumulate(nodes, grads, *qkv) else { return };
            attention_backward(&src, layout, probs, g, d);
        }
        Op::BceWithLogits { logits, targets } => {
            let z = Arc::clone(&nodes[*logits].value);
            if let Some(d) = accumulate(nodes, grads, *logits) {
                let s = g[0] / z.len() as f64;
                for ((d, zv), t) in d.iter_mut().zip(z.iter()).zip(targets) {
                    *d += s * (sigmoid_scalar(*zv) - t);
                }
            }
        }
    }
}

fn attention_backward(
    src: &[f64],
    layout: &AttentionLayout,
    probs: &AttentionProbs,
    g: &[f64],
    dqkv: &mut [f64],
) {
    let t = layout.rows();
    let three_d = src.len() / t;
    let d = three_d / 3;
    let heads = layout.heads();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = Vec::new();
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for i in 0..t {
            let ks = layout.key_set(i);
            let p = probs.row(h, i);
            let go = &g[i * d + qo..i * d + qo + dh];
            dp.clear();
            for (&w, j) in p.iter().zip(ks.iter()) {
                let v = &src[j * three_d + vo..j * three_d + vo + dh];
                dp.push(go.iter().zip(v).map(|(a, b)| a * b).sum::<f64>());
                let dv = &mut dqkv[j * three_d + vo..j * three_d + vo + dh];
                dv.iter_mut().zip(go).for_each(|(dv, gv)| *dv += w * gv);
            }
            let s: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for ((&w, &dpj), j) in p.iter().zip(&dp).zip(ks.iter()) {
                let ds = w * (dpj - s) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    dqkv[i * three_d + qo + c] += ds * src[j * three_d + ko + c];
                    dqkv[j * three_d + ko + c] += ds * src[i * three_d + qo + c];
                }
            }
        }
    }
}
