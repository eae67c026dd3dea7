//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! parameters and for leaves created with [`Graph::input`].

use std::collections::HashMap;
use std::sync::Arc;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, MatRef, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Marker used in gather indices for "no source element" (reads as zero).
pub const GATHER_ZERO: u32 = u32::MAX;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    ClampedExp { x: Var, lo: f64, hi: f64 },
    Ln(Var),
    Softplus(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Gather { x: Var, index: Arc<[u32]> },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    SumCols(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SigmoidFocal { x: Var, targets: Arc<Tensor>, alpha: f64, gamma: f64 },
    BceLogits { x: Var, targets: Arc<Tensor> },
    Giou { pred: Var, target: Arc<Tensor> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    activation_bytes: usize,
    peak_backward_bytes: usize,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph without parameters; use [`Graph::input`] for differentiable leaves.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            activation_bytes: 0,
            peak_backward_bytes: 0,
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by non-parameter node values recorded so far.
    pub fn activation_bytes(&self) -> usize {
        self.activation_bytes
    }

    /// Activation bytes plus the largest gradient working set seen during
    /// the most recent backward pass.
    pub fn peak_bytes(&self) -> usize {
        self.activation_bytes + self.peak_backward_bytes
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.activation_bytes += value.bytes();
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A non-differentiable constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf; its gradient is reported by [`Backward::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The node for a stored parameter, created once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self
            .store
            .expect("graph was created without a parameter store");
        let value = store.get_arc(id);
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = Arc::clone(&self.nodes[x.0].value);
        self.activation_bytes += value.bytes();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, what: &str) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "{what}: shape mismatch {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y, "add");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y, "sub");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y, "mul");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.shape(), (1, ta.cols()), "add_row: row shape mismatch");
        let mut out = ta.clone();
        let cols = ta.cols();
        for chunk in out.data_mut().chunks_mut(cols.max(1)) {
            for (o, r) in chunk.iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 x cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.shape(), (1, ta.cols()), "mul_row: row shape mismatch");
        let mut out = ta.clone();
        let cols = ta.cols();
        for chunk in out.data_mut().chunks_mut(cols.max(1)) {
            for (o, r) in chunk.iter_mut().zip(tr.data()) {
                *o *= r;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::MulRow(a, row), rg)
    }

    /// Multiplies every column of `a` elementwise by a `rows x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (ta, tc) = (self.value(a), self.value(col));
        assert_eq!(tc.shape(), (ta.rows(), 1), "mul_col: column shape mismatch");
        let mut out = ta.clone();
        let cols = ta.cols();
        for (r, chunk) in out.data_mut().chunks_mut(cols.max(1)).enumerate() {
            let s = tc.data()[r];
            for o in chunk {
                *o *= s;
            }
        }
        let rg = self.rg(a) || self.rg(col);
        self.push(out, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            let u = GELU_C * (x + 0.044_715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    /// `exp(clamp(x, lo, hi))`; gradient is zero outside `(lo, hi)`.
    pub fn clamped_exp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi).exp());
        let rg = self.rg(a);
        self.push(out, Op::ClampedExp { x: a, lo, hi }, rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(out, Op::Ln(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(out, Op::Softplus(a), rg)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let (rows, cols) = ta.shape();
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = ta.row_slice(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
            for (d, v) in dst.iter_mut().zip(row) {
                *d = (v - mean) * inv;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm { x: a, inv_std }, rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = ta.clone();
        let cols = ta.cols();
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = ta.clone();
        let cols = ta.cols();
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    /// `out.flat[i] = x.flat[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, rows: usize, cols: usize, index: Arc<[u32]>) -> Var {
        assert_eq!(index.len(), rows * cols, "gather: index length mismatch");
        let src = self.value(x).data();
        let n = src.len();
        let data = index
            .iter()
            .map(|&i| {
                if i == GATHER_ZERO {
                    0.0
                } else {
                    debug_assert!((i as usize) < n);
                    src[i as usize]
                }
            })
            .collect();
        let out = Tensor::from_vec(rows, cols, data);
        let rg = self.rg(x);
        self.push(out, Op::Gather { x, index }, rg)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(x).clone().reshaped(rows, cols);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        let rg = self.rg(x);
        self.push(out, Op::MeanAll(x), rg)
    }

    /// Column sums as a `1 x cols` row.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(t.row_slice(r)) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SumRows(x), rg)
    }

    /// Row sums as a `rows x 1` column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.rows(), 1, |r, _| t.row_slice(r).iter().sum());
        let rg = self.rg(x);
        self.push(out, Op::SumCols(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let out = Tensor::from_fn(t.rows(), len, |r, c| t.get(r, start + c));
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), rows, "concat_cols: row mismatch");
                self.value(p).cols()
            })
            .sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            for r in 0..rows {
                out.data_mut()[r * total + off..r * total + off + t.cols()]
                    .copy_from_slice(t.row_slice(r));
            }
            off += t.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows: column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::from_vec(rows, cols, data);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Elementwise sigmoid focal loss against (possibly soft) targets.
    pub fn sigmoid_focal(&mut self, logits: Var, targets: Arc<Tensor>, alpha: f64, gamma: f64) -> Var {
        let tx = self.value(logits);
        assert_eq!(tx.shape(), targets.shape(), "focal: target shape mismatch");
        let data = tx
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| {
                let p = sigmoid(x);
                let pos = -alpha * (1.0 - p).powf(gamma) * -softplus(-x);
                let neg = -(1.0 - alpha) * p.powf(gamma) * -softplus(x);
                t * pos + (1.0 - t) * neg
            })
            .collect();
        let out = Tensor::from_vec(tx.rows(), tx.cols(), data);
        let rg = self.rg(logits);
        self.push(
            out,
            Op::SigmoidFocal {
                x: logits,
                targets,
                alpha,
                gamma,
            },
            rg,
        )
    }

    /// Elementwise binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Arc<Tensor>) -> Var {
        let tx = self.value(logits);
        assert_eq!(tx.shape(), targets.shape(), "bce: target shape mismatch");
        let data = tx
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| softplus(x) - t * x)
            .collect();
        let out = Tensor::from_vec(tx.rows(), tx.cols(), data);
        let rg = self.rg(logits);
        self.push(out, Op::BceLogits { x: logits, targets }, rg)
    }

    /// `1 - GIoU` per row for boxes encoded as positive distances
    /// `(left, top, right, bottom)` from a shared anchor point.
    pub fn giou_loss(&mut self, pred: Var, target: Arc<Tensor>) -> Var {
        let tp = self.value(pred);
        assert_eq!(tp.cols(), 4, "giou: predictions must have 4 columns");
        assert_eq!(tp.shape(), target.shape(), "giou: target shape mismatch");
        let data = (0..tp.rows())
            .map(|r| 1.0 - giou_terms(tp.row_slice(r), target.row_slice(r)).giou)
            .collect();
        let out = Tensor::from_vec(tp.rows(), 1, data);
        let rg = self.rg(pred);
        self.push(out, Op::Giou { pred, target }, rg)
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&mut self, loss: Var) -> Backward {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar output");
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut out = Backward {
            leaves: HashMap::new(),
            params: Gradients::default(),
        };
        if !self.nodes[loss.0].requires_grad {
            return out;
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut live = 8usize;
        let mut peak = live;
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), g);
                }
                Op::Param(id) => {
                    out.params.insert(*id, g);
                }
                op => {
                    let gbytes = g.bytes();
                    self.backprop_op(op, &node.value, g, &mut grads, &mut live);
                    peak = peak.max(live);
                    live = live.saturating_sub(gbytes);
                }
            }
        }
        self.peak_backward_bytes = peak;
        out
    }

    fn backprop_op(
        &self,
        op: &Op,
        y: &Tensor,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        live: &mut usize,
    ) {
        let nodes = &self.nodes;
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };
        let rg = |v: Var| nodes[v.0].requires_grad;
        macro_rules! buf {
            ($v:expr) => {
                grad_buf(grads, nodes, $v, live)
            };
        }
        // Accumulates `expr(i, gv)` into the gradient of `$v` elementwise.
        macro_rules! elementwise {
            ($v:expr, |$i:ident, $gv:ident| $e:expr) => {{
                let b = grad_buf(grads, nodes, $v, live);
                for ($i, (d, $gv)) in b.data_mut().iter_mut().zip(g.data()).enumerate() {
                    let $gv = *$gv;
                    let _ = $i;
                    *d += $e;
                }
            }};
        }
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if rg(a) {
                    let ga = buf!(a);
                    gemm(MatRef::new(&g, false), MatRef::new(val(b), true), ga, 1.0);
                }
                if rg(b) {
                    let gb = buf!(b);
                    gemm(MatRef::new(val(a), true), MatRef::new(&g, false), gb, 1.0);
                }
            }
            Op::Transpose(a) => {
                if rg(*a) {
                    buf!(*a).add_assign(&g.transpose());
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        buf!(v).add_assign(&g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    buf!(*a).add_assign(&g);
                }
                if rg(*b) {
                    elementwise!(*b, |i, gv| -gv);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if rg(a) {
                    let other = val(b).data();
                    elementwise!(a, |i, gv| gv * other[i]);
                }
                if rg(b) {
                    let other = val(a).data();
                    elementwise!(b, |i, gv| gv * other[i]);
                }
            }
            Op::AddRow(a, row) => {
                if rg(*a) {
                    buf!(*a).add_assign(&g);
                }
                if rg(*row) {
                    let cols = g.cols().max(1);
                    let gr = buf!(*row);
                    for chunk in g.data().chunks(cols) {
                        for (d, gv) in gr.data_mut().iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::MulRow(a, row) => {
                let cols = g.cols().max(1);
                if rg(*a) {
                    let r = val(*row).data();
                    elementwise!(*a, |i, gv| gv * r[i % cols]);
                }
                if rg(*row) {
                    let x = val(*a);
                    let gr = buf!(*row);
                    for (gc, xc) in g.data().chunks(cols).zip(x.data().chunks(cols)) {
                        for ((d, gv), xv) in gr.data_mut().iter_mut().zip(gc).zip(xc) {
                            *d += gv * xv;
                        }
                    }
                }
            }
            Op::MulCol(a, col) => {
                let cols = g.cols().max(1);
                if rg(*a) {
                    let c = val(*col).data();
                    elementwise!(*a, |i, gv| gv * c[i / cols]);
                }
                if rg(*col) {
                    let x = val(*a);
                    let gc = buf!(*col);
                    for (r, (grow, xrow)) in g.data().chunks(cols).zip(x.data().chunks(cols)).enumerate() {
                        gc.data_mut()[r] += grow.iter().zip(xrow).map(|(p, q)| p * q).sum::<f64>();
                    }
                }
            }
            Op::Scale(a, s) => {
                if rg(*a) {
                    let s = *s;
                    elementwise!(*a, |i, gv| gv * s);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if rg(*a) {
                    elementwise!(*a, |i, gv| gv);
                }
            }
            Op::Relu(a) => {
                if rg(*a) {
                    let x = val(*a).data();
                    elementwise!(*a, |i, gv| if x[i] > 0.0 { gv } else { 0.0 });
                }
            }
            Op::Gelu(a) => {
                if rg(*a) {
                    let x = val(*a).data();
                    elementwise!(*a, |i, gv| {
                        let x = x[i];
                        let u = GELU_C * (x + 0.044_715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
                        gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    });
                }
            }
            Op::Sigmoid(a) => {
                if rg(*a) {
                    let yd = y.data();
                    elementwise!(*a, |i, gv| gv * yd[i] * (1.0 - yd[i]));
                }
            }
            Op::Exp(a) => {
                if rg(*a) {
                    let yd = y.data();
                    elementwise!(*a, |i, gv| gv * yd[i]);
                }
            }
            Op::ClampedExp { x, lo, hi } => {
                if rg(*x) {
                    let xv = val(*x).data();
                    let yd = y.data();
                    let (lo, hi) = (*lo, *hi);
                    elementwise!(*x, |i, gv| if xv[i] > lo && xv[i] < hi { gv * yd[i] } else { 0.0 });
                }
            }
            Op::Ln(a) => {
                if rg(*a) {
                    let x = val(*a).data();
                    elementwise!(*a, |i, gv| gv / x[i]);
                }
            }
            Op::Softplus(a) => {
                if rg(*a) {
                    let x = val(*a).data();
                    elementwise!(*a, |i, gv| gv * sigmoid(x[i]));
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if rg(*x) {
                    let cols = g.cols();
                    let gx = buf!(*x);
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = g.row_slice(r);
                        let yr = y.row_slice(r);
                        let mg = gr.iter().sum::<f64>() / cols as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        let dst = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                        for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                            *d += inv * (gv - mg - yv * mgy);
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if rg(*a) {
                    let cols = g.cols();
                    let gx = buf!(*a);
                    for r in 0..g.rows() {
                        let gr = g.row_slice(r);
                        let yr = y.row_slice(r);
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        let dst = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                        for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                if rg(*a) {
                    let cols = g.cols();
                    let gx = buf!(*a);
                    for r in 0..g.rows() {
                        let gr = g.row_slice(r);
                        let yr = y.row_slice(r);
                        let s: f64 = gr.iter().sum();
                        let dst = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                        for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                            *d += gv - yv.exp() * s;
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                if rg(*x) {
                    let dst = buf!(*x).data_mut();
                    for (&i, gv) in index.iter().zip(g.data()) {
                        if i != GATHER_ZERO {
                            dst[i as usize] += gv;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if rg(*a) {
                    let s = g.data()[0];
                    for d in buf!(*a).data_mut() {
                        *d += s;
                    }
                }
            }
            Op::MeanAll(a) => {
                if rg(*a) {
                    let s = g.data()[0] / val(*a).len().max(1) as f64;
                    for d in buf!(*a).data_mut() {
                        *d += s;
                    }
                }
            }
            Op::SumRows(a) => {
                if rg(*a) {
                    let cols = g.cols().max(1);
                    for chunk in buf!(*a).data_mut().chunks_mut(cols) {
                        for (d, gv) in chunk.iter_mut().zip(g.data()) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SumCols(a) => {
                if rg(*a) {
                    let cols = val(*a).cols().max(1);
                    for (chunk, gv) in buf!(*a).data_mut().chunks_mut(cols).zip(g.data()) {
                        for d in chunk {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if rg(*x) {
                    let cols = val(*x).cols();
                    let len = g.cols();
                    let b = buf!(*x);
                    for r in 0..g.rows() {
                        let dst = &mut b.data_mut()[r * cols + start..r * cols + start + len];
                        for (d, gv) in dst.iter_mut().zip(g.row_slice(r)) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if rg(p) {
                        let b = buf!(p);
                        for r in 0..g.rows() {
                            let src = &g.data()[r * total + off..r * total + off + w];
                            for (d, gv) in b.data_mut()[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *d += gv;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if rg(p) {
                        let b = buf!(p);
                        for (d, gv) in b.data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                            *d += gv;
                        }
                    }
                    off += n;
                }
            }
            Op::SigmoidFocal {
                x,
                targets,
                alpha,
                gamma,
            } => {
                if rg(*x) {
                    let xv = val(*x).data();
                    let td = targets.data();
                    let (alpha, gamma) = (*alpha, *gamma);
                    elementwise!(*x, |i, gv| {
                        let x = xv[i];
                        let t = td[i];
                        let p = sigmoid(x);
                        let log_p = -softplus(-x);
                        let log_q = -softplus(x);
                        let dpos = alpha * (1.0 - p).powf(gamma) * (gamma * p * log_p - (1.0 - p));
                        let dneg = (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * log_q);
                        gv * (t * dpos + (1.0 - t) * dneg)
                    });
                }
            }
            Op::BceLogits { x, targets } => {
                if rg(*x) {
                    let xv = val(*x).data();
                    let td = targets.data();
                    elementwise!(*x, |i, gv| gv * (sigmoid(xv[i]) - td[i]));
                }
            }
            Op::Giou { pred, target } => {
                if rg(*pred) {
                    let pv = val(*pred);
                    let gp = buf!(*pred);
                    for r in 0..pv.rows() {
                        let d = giou_grad(pv.row_slice(r), target.row_slice(r));
                        let gr = g.data()[r];
                        for (k, dk) in d.iter().enumerate() {
                            gp.data_mut()[r * 4 + k] -= gr * dk;
                        }
                    }
                }
            }
        }
    }
}

fn grad_buf<'a>(
    grads: &'a mut [Option<Tensor>],
    nodes: &[Node],
    v: Var,
    live: &mut usize,
) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| {
        let (r, c) = nodes[v.0].value.shape();
        *live += r * c * std::mem::size_of::<f64>();
        Tensor::zeros(r, c)
    })
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Backward {
    leaves: HashMap<Var, Tensor>,
    params: Gradients,
}

impl Backward {
    /// Gradient for a leaf created with [`Graph::input`], if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

struct GiouTerms {
    giou: f64,
}

fn giou_terms(p: &[f64], t: &[f64]) -> GiouTerms {
    let (l, tp, r, b) = (p[0], p[1], p[2], p[3]);
    let (lt, tt, rt, bt) = (t[0], t[1], t[2], t[3]);
    let ap = (l + r) * (tp + b);
    let at = (lt + rt) * (tt + bt);
    let iw = l.min(lt) + r.min(rt);
    let ih = tp.min(tt) + b.min(bt);
    let inter = iw.max(0.0) * ih.max(0.0);
    let union = ap + at - inter;
    let ew = l.max(lt) + r.max(rt);
    let eh = tp.max(tt) + b.max(bt);
    let enclose = ew * eh;
    let iou = inter / union;
    GiouTerms {
        giou: iou - (enclose - union) / enclose,
    }
}

// d GIoU / d (l, t, r, b)
fn giou_grad(p: &[f64], t: &[f64]) -> [f64; 4] {
    let (l, tp, r, b) = (p[0], p[1], p[2], p[3]);
    let (lt, tt, rt, bt) = (t[0], t[1], t[2], t[3]);
    let ap = (l + r) * (tp + b);
    let at = (lt + rt) * (tt + bt);
    let iw = l.min(lt) + r.min(rt);
    let ih = tp.min(tt) + b.min(bt);
    let inter = iw * ih;
    let union = ap + at - inter;
    let ew = l.max(lt) + r.max(rt);
    let eh = tp.max(tt) + b.max(bt);
    let enclose = ew * eh;

    let d_ap = [tp + b, l + r, tp + b, l + r];
    let d_inter = [
        if l < lt { ih } else { 0.0 },
        if tp < tt { iw } else { 0.0 },
        if r < rt { ih } else { 0.0 },
        if b < bt { iw } else { 0.0 },
    ];
    let d_enc = [
        if l > lt { eh } else { 0.0 },
        if tp > tt { ew } else { 0.0 },
        if r > rt { eh } else { 0.0 },
        if b > bt { ew } else { 0.0 },
    ];
    let mut out = [0.0; 4];
    for k in 0..4 {
        let d_union = d_ap[k] - d_inter[k];
        // giou = I/U - 1 + U/E
        out[k] = d_inter[k] / union - inter * d_union / (union * union) + d_union / enclose
            - union * d_enc[k] / (enclose * enclose);
    }
    out
}
