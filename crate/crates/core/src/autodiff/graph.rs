//! Tape-based reverse-mode differentiation over dense 2-D tensors.
//!
//! A [`Graph`] records every operation applied to its [`Tensor`] handles.
//! Calling [`Graph::backward`] on a scalar walks the tape in reverse and
//! accumulates gradients additively into every node that requires them.
//! A graph built with [`Graph::inference`] records no backward information,
//! so intermediate caches (attention probabilities and the like) are dropped
//! as soon as they are produced.
//!
//! Tensors are always rank 2; a row vector is `1 x c` and a scalar `1 x 1`.

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use crate::linalg::{gemm, gemm_into, Matrix};

pub type NodeId = usize;

/// Backward rule for an operation defined outside this module.
pub trait CustomBackward {
    /// Gradients for each input given the output gradient. `None` means the
    /// input receives no gradient.
    fn backward(&self, grad: &Matrix, inputs: &[&Matrix], output: &Matrix) -> Vec<Option<Matrix>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Exp,
    Ln,
    Softplus,
    Gelu,
    Square,
    Sqrt,
}

enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow { x: NodeId, row: NodeId },
    Scale { x: NodeId, s: f64 },
    AddConst { x: NodeId },
    Unary { x: NodeId, kind: Unary },
    SoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Matrix, inv_std: Vec<f64> },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<Matrix> },
    SliceCols { x: NodeId, start: usize },
    SliceRows { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    MeanRows(NodeId),
    SumAll(NodeId),
    BroadcastRows(NodeId),
    Custom { inputs: Vec<NodeId>, rule: Box<dyn CustomBackward> },
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::AddRow { x, row } => vec![*x, *row],
            Op::Scale { x, .. }
            | Op::AddConst { x }
            | Op::Unary { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. } => vec![*x],
            Op::SoftmaxRows(x) | Op::MeanRows(x) | Op::SumAll(x) | Op::BroadcastRows(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Arc<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Not `Sync`; build one graph per thread.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).field("record", &self.record).finish()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Tensor<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, t: Tensor<'_>) -> Option<&Matrix> {
        self.grads.get(t.id).and_then(Option::as_ref)
    }

    /// Gradient of `t`, or zeros of its shape if it received none.
    pub fn get_or_zeros(&self, t: Tensor<'_>) -> Matrix {
        self.get(t).cloned().unwrap_or_else(|| {
            let (r, c) = t.shape();
            Matrix::zeros(r, c)
        })
    }
}

impl Graph {
    /// Graph that records backward information.
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: true }
    }

    /// Graph for forward-only evaluation.
    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op) -> Tensor<'_> {
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&self, value: Arc<Matrix>, op: Op) -> Tensor<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.record && op.parents().iter().any(|&p| nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node { value, op, requires_grad });
        Tensor { graph: self, id: nodes.len() - 1 }
    }

    fn leaf(&self, value: Arc<Matrix>, requires_grad: bool) -> Tensor<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad: requires_grad && self.record });
        Tensor { graph: self, id: nodes.len() - 1 }
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Matrix) -> Tensor<'_> {
        self.leaf(Arc::new(value), false)
    }

    pub fn scalar(&self, v: f64) -> Tensor<'_> {
        self.constant(Matrix::scalar(v))
    }

    /// Differentiable leaf.
    pub fn variable(&self, value: Matrix) -> Tensor<'_> {
        self.leaf(Arc::new(value), true)
    }

    /// Differentiable leaf sharing storage with the caller.
    pub fn variable_shared(&self, value: Arc<Matrix>) -> Tensor<'_> {
        self.leaf(value, true)
    }

    /// Whether an op over these inputs would be differentiated.
    pub fn needs_grad(&self, inputs: &[Tensor<'_>]) -> bool {
        let nodes = self.nodes.borrow();
        self.record && inputs.iter().any(|t| nodes[t.id].requires_grad)
    }

    /// Registers an externally computed op.
    pub fn custom<'g>(&'g self, inputs: &[Tensor<'g>], value: Matrix, rule: Box<dyn CustomBackward>) -> Tensor<'g> {
        self.push(value, Op::Custom { inputs: inputs.iter().map(|t| t.id).collect(), rule })
    }

    pub fn concat_cols<'g>(&'g self, parts: &[Tensor<'g>]) -> Tensor<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = parts[0].shape().0;
        let vals: Vec<Arc<Matrix>> = parts.iter().map(|p| p.value()).collect();
        let cols: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for v in &vals {
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        self.push(out, Op::ConcatCols(parts.iter().map(|t| t.id).collect()))
    }

    pub fn concat_rows<'g>(&'g self, parts: &[Tensor<'g>]) -> Tensor<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = parts[0].shape().1;
        let vals: Vec<Arc<Matrix>> = parts.iter().map(|p| p.value()).collect();
        let rows: usize = vals.iter().map(|v| v.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for v in &vals {
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.iter().map(|t| t.id).collect()))
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean_of<'g>(&'g self, parts: &[Tensor<'g>]) -> Tensor<'g> {
        assert!(!parts.is_empty(), "mean of nothing");
        let mut acc = parts[0];
        for p in &parts[1..] {
            acc = acc.add(*p);
        }
        if parts.len() == 1 {
            acc
        } else {
            acc.scale(1.0 / parts.len() as f64)
        }
    }

    /// Multi-head scaled dot-product attention. `q`, `k`, `v` are `m x h`;
    /// head `i` uses columns `i*h/heads .. (i+1)*h/heads`. Returns the
    /// concatenated head outputs (`m x h`).
    pub fn attention<'g>(&'g self, q: Tensor<'g>, k: Tensor<'g>, v: Tensor<'g>, heads: usize) -> Tensor<'g> {
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        let (m, h) = qv.shape();
        assert_eq!(kv.shape(), (m, h), "attention key shape");
        assert_eq!(vv.shape(), (m, h), "attention value shape");
        assert!(heads > 0 && h % heads == 0, "embedding width {h} not divisible by {heads} heads");
        let keep = self.needs_grad(&[q, k, v]);
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(m, h);
        let mut probs = Vec::with_capacity(if keep { heads } else { 0 });
        for head in 0..heads {
            let qh = cols_of(&qv, head * dh, dh);
            let kh = cols_of(&kv, head * dh, dh);
            let vh = cols_of(&vv, head * dh, dh);
            let mut s = Matrix::zeros(m, m);
            gemm_into(scale, &qh, false, &kh, true, 0.0, &mut s);
            softmax_rows_in_place(&mut s);
            let oh = gemm(&s, false, &vh, false);
            for r in 0..m {
                out.row_mut(r)[head * dh..(head + 1) * dh].copy_from_slice(oh.row(r));
            }
            if keep {
                probs.push(s);
            }
        }
        self.push(out, Op::Attention { q: q.id, k: k.id, v: v.id, heads, probs })
    }

    /// Reverse pass from a `1 x 1` root.
    pub fn backward(&self, root: Tensor<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.id].requires_grad {
            return Gradients { grads };
        }
        grads[root.id] = Some(Matrix::scalar(1.0));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
        }
        Gradients { grads }
    }
}

fn cols_of(m: &Matrix, start: usize, len: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), len);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
    }
    out
}

fn softmax_rows_in_place(s: &mut Matrix) {
    for r in 0..s.rows() {
        let row = s.row_mut(r);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut tot = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            tot += *v;
        }
        for v in row.iter_mut() {
            *v /= tot;
        }
    }
}

fn col_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(a.shape(), b.shape());
    Matrix::from_vec(a.rows(), a.cols(), a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect())
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    if !nodes[id].requires_grad {
        return;
    }
    debug_assert_eq!(g.shape(), nodes[id].value.shape(), "gradient shape for node {id}");
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn propagate(nodes: &[Node], id: NodeId, g: &Matrix, grads: &mut [Option<Matrix>]) {
    let val = |i: NodeId| -> &Matrix { &nodes[i].value };
    let needs = |i: NodeId| nodes[i].requires_grad;
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let (a, b, ta, tb) = (*a, *b, *ta, *tb);
            let (av, bv) = (val(a), val(b));
            match (ta, tb) {
                (false, false) => {
                    if needs(a) {
                        accumulate(nodes, grads, a, gemm(g, false, bv, true));
                    }
                    if needs(b) {
                        accumulate(nodes, grads, b, gemm(av, true, g, false));
                    }
                }
                (false, true) => {
                    if needs(a) {
                        accumulate(nodes, grads, a, gemm(g, false, bv, false));
                    }
                    if needs(b) {
                        accumulate(nodes, grads, b, gemm(g, true, av, false));
                    }
                }
                (true, false) => {
                    if needs(a) {
                        accumulate(nodes, grads, a, gemm(bv, false, g, true));
                    }
                    if needs(b) {
                        accumulate(nodes, grads, b, gemm(av, false, g, false));
                    }
                }
                (true, true) => unreachable!("double-transposed matmul is not constructed"),
            }
        }
        Op::Affine { x, w, b } => {
            if needs(*x) {
                accumulate(nodes, grads, *x, gemm(g, false, val(*w), true));
            }
            if needs(*w) {
                accumulate(nodes, grads, *w, gemm(val(*x), true, g, false));
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, col_sums(g));
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                accumulate(nodes, grads, *a, zip_map(g, val(*b), |x, y| x * y));
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, zip_map(g, val(*a), |x, y| x * y));
            }
        }
        Op::AddRow { x, row } => {
            accumulate(nodes, grads, *x, g.clone());
            if needs(*row) {
                accumulate(nodes, grads, *row, col_sums(g));
            }
        }
        Op::Scale { x, s } => {
            let s = *s;
            accumulate(nodes, grads, *x, g.map(|v| v * s));
        }
        Op::AddConst { x } => accumulate(nodes, grads, *x, g.clone()),
        Op::Unary { x, kind } => {
            let xv = val(*x);
            let dx = match kind {
                Unary::Exp => zip_map(g, out, |a, y| a * y),
                Unary::Ln => zip_map(g, xv, |a, x| a / x),
                Unary::Softplus => zip_map(g, xv, |a, x| a * sigmoid(x)),
                Unary::Gelu => zip_map(g, xv, |a, x| a * gelu_grad(x)),
                Unary::Square => zip_map(g, xv, |a, x| 2.0 * a * x),
                Unary::Sqrt => zip_map(g, out, |a, y| 0.5 * a / y),
            };
            accumulate(nodes, grads, *x, dx);
        }
        Op::SoftmaxRows(x) => {
            let mut dx = Matrix::zeros(out.rows(), out.cols());
            for r in 0..out.rows() {
                let (yr, gr) = (out.row(r), g.row(r));
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, y), gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                    *d = y * (gv - dot);
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let gam = val(*gamma);
            let h = xhat.cols();
            if needs(*x) {
                let mut dx = Matrix::zeros(xhat.rows(), h);
                for r in 0..xhat.rows() {
                    let (xh, gr) = (xhat.row(r), g.row(r));
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for c in 0..h {
                        let d = gr[c] * gam.data()[c];
                        sum_d += d;
                        sum_dx += d * xh[c];
                    }
                    let k = inv_std[r] / h as f64;
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        let d = gr[c] * gam.data()[c];
                        *o = k * (h as f64 * d - sum_d - xh[c] * sum_dx);
                    }
                }
                accumulate(nodes, grads, *x, dx);
            }
            if needs(*gamma) {
                accumulate(nodes, grads, *gamma, col_sums(&zip_map(g, xhat, |a, b| a * b)));
            }
            if needs(*beta) {
                accumulate(nodes, grads, *beta, col_sums(g));
            }
        }
        Op::Attention { q, k, v, heads, probs } => {
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let (m, h) = qv.shape();
            let dh = h / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut dq = Matrix::zeros(m, h);
            let mut dk = Matrix::zeros(m, h);
            let mut dv = Matrix::zeros(m, h);
            for (head, p) in probs.iter().enumerate() {
                let off = head * dh;
                let gh = cols_of(g, off, dh);
                let qh = cols_of(qv, off, dh);
                let kh = cols_of(kv, off, dh);
                let vh = cols_of(vv, off, dh);
                let dvh = gemm(p, true, &gh, false);
                let dp = gemm(&gh, false, &vh, true);
                let mut ds = Matrix::zeros(m, m);
                for r in 0..m {
                    let (pr, dpr) = (p.row(r), dp.row(r));
                    let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                    for ((o, a), b) in ds.row_mut(r).iter_mut().zip(pr).zip(dpr) {
                        *o = a * (b - dot) * scale;
                    }
                }
                let dqh = gemm(&ds, false, &kh, false);
                let dkh = gemm(&ds, true, &qh, false);
                for r in 0..m {
                    dq.row_mut(r)[off..off + dh].copy_from_slice(dqh.row(r));
                    dk.row_mut(r)[off..off + dh].copy_from_slice(dkh.row(r));
                    dv.row_mut(r)[off..off + dh].copy_from_slice(dvh.row(r));
                }
            }
            accumulate(nodes, grads, *q, dq);
            accumulate(nodes, grads, *k, dk);
            accumulate(nodes, grads, *v, dv);
        }
        Op::SliceCols { x, start } => {
            let xv = val(*x);
            let mut dx = Matrix::zeros(xv.rows(), xv.cols());
            for r in 0..xv.rows() {
                dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::SliceRows { x, start } => {
            let xv = val(*x);
            let mut dx = Matrix::zeros(xv.rows(), xv.cols());
            let c = xv.cols();
            dx.data_mut()[*start * c..(*start + g.rows()) * c].copy_from_slice(g.data());
            accumulate(nodes, grads, *x, dx);
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for &p in parts {
                let w = val(p).cols();
                if needs(p) {
                    accumulate(nodes, grads, p, cols_of(g, off, w));
                }
                off += w;
            }
        }
        Op::ConcatRows(parts) => {
            let c = g.cols();
            let mut off = 0;
            for &p in parts {
                let r = val(p).rows();
                if needs(p) {
                    accumulate(nodes, grads, p, Matrix::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec()));
                }
                off += r;
            }
        }
        Op::MeanRows(x) => {
            let xv = val(*x);
            let inv = 1.0 / xv.rows() as f64;
            let mut dx = Matrix::zeros(xv.rows(), xv.cols());
            for r in 0..xv.rows() {
                for (o, v) in dx.row_mut(r).iter_mut().zip(g.data()) {
                    *o = v * inv;
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::SumAll(x) => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, Matrix::filled(xv.rows(), xv.cols(), g.data()[0]));
        }
        Op::BroadcastRows(x) => accumulate(nodes, grads, *x, col_sums(g)),
        Op::Custom { inputs, rule } => {
            let ins: Vec<&Matrix> = inputs.iter().map(|&i| val(i)).collect();
            let gs = rule.backward(g, &ins, out);
            assert_eq!(gs.len(), inputs.len(), "custom backward returned wrong number of gradients");
            for (&i, gi) in inputs.iter().zip(gs) {
                if let Some(gi) = gi {
                    accumulate(nodes, grads, i, gi);
                }
            }
        }
    }
}

impl<'g> Tensor<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Matrix> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.graph.nodes.borrow()[self.id].value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.shape(), (1, 1), "item() on a non-scalar tensor");
        v.data()[0]
    }

    fn same_graph(&self, other: &Tensor<'_>) {
        assert!(std::ptr::eq(self.graph, other.graph), "tensors from different graphs");
    }

    fn binary(self, other: Tensor<'g>, op: Op, f: impl Fn(f64, f64) -> f64) -> Tensor<'g> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        self.graph.push(zip_map(&a, &b, f), op)
    }

    fn unary(self, kind: Unary, f: impl Fn(f64) -> f64) -> Tensor<'g> {
        let v = self.value().map(f);
        self.graph.push(v, Op::Unary { x: self.id, kind })
    }

    pub fn matmul(self, other: Tensor<'g>) -> Tensor<'g> {
        self.same_graph(&other);
        let v = gemm(&self.value(), false, &other.value(), false);
        self.graph.push(v, Op::MatMul { a: self.id, b: other.id, ta: false, tb: false })
    }

    /// `self * other^T`.
    pub fn matmul_nt(self, other: Tensor<'g>) -> Tensor<'g> {
        self.same_graph(&other);
        let v = gemm(&self.value(), false, &other.value(), true);
        self.graph.push(v, Op::MatMul { a: self.id, b: other.id, ta: false, tb: true })
    }

    /// `self^T * other`.
    pub fn matmul_tn(self, other: Tensor<'g>) -> Tensor<'g> {
        self.same_graph(&other);
        let v = gemm(&self.value(), true, &other.value(), false);
        self.graph.push(v, Op::MatMul { a: self.id, b: other.id, ta: true, tb: false })
    }

    /// `self * w + b` with `b` a `1 x out` row broadcast over rows.
    pub fn affine(self, w: Tensor<'g>, b: Tensor<'g>) -> Tensor<'g> {
        self.same_graph(&w);
        self.same_graph(&b);
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        assert_eq!(bv.shape(), (1, wv.cols()), "affine bias shape");
        let mut out = Matrix::zeros(xv.rows(), wv.cols());
        for r in 0..out.rows() {
            out.row_mut(r).copy_from_slice(bv.data());
        }
        gemm_into(1.0, &xv, false, &wv, false, 1.0, &mut out);
        self.graph.push(out, Op::Affine { x: self.id, w: w.id, b: b.id })
    }

    pub fn add(self, other: Tensor<'g>) -> Tensor<'g> {
        let (a, b) = (self.id, other.id);
        self.binary(other, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(self, other: Tensor<'g>) -> Tensor<'g> {
        let (a, b) = (self.id, other.id);
        self.binary(other, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(self, other: Tensor<'g>) -> Tensor<'g> {
        let (a, b) = (self.id, other.id);
        self.binary(other, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `1 x c` row to every row.
    pub fn add_row(self, row: Tensor<'g>) -> Tensor<'g> {
        self.same_graph(&row);
        let (xv, rv) = (self.value(), row.value());
        assert_eq!(rv.shape(), (1, xv.cols()), "add_row shape");
        let mut out = (*xv).clone();
        for r in 0..out.rows() {
            for (o, v) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += v;
            }
        }
        self.graph.push(out, Op::AddRow { x: self.id, row: row.id })
    }

    pub fn scale(self, s: f64) -> Tensor<'g> {
        let v = self.value().map(|x| x * s);
        self.graph.push(v, Op::Scale { x: self.id, s })
    }

    pub fn add_const(self, c: f64) -> Tensor<'g> {
        let v = self.value().map(|x| x + c);
        self.graph.push(v, Op::AddConst { x: self.id })
    }

    pub fn exp(self) -> Tensor<'g> {
        self.unary(Unary::Exp, f64::exp)
    }

    pub fn ln(self) -> Tensor<'g> {
        self.unary(Unary::Ln, f64::ln)
    }

    pub fn softplus(self) -> Tensor<'g> {
        self.unary(Unary::Softplus, softplus)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Tensor<'g> {
        self.unary(Unary::Gelu, gelu)
    }

    pub fn square(self) -> Tensor<'g> {
        self.unary(Unary::Square, |x| x * x)
    }

    pub fn sqrt(self) -> Tensor<'g> {
        self.unary(Unary::Sqrt, f64::sqrt)
    }

    pub fn softmax_rows(self) -> Tensor<'g> {
        let mut v = (*self.value()).clone();
        softmax_rows_in_place(&mut v);
        self.graph.push(v, Op::SoftmaxRows(self.id))
    }

    /// Row-wise layer normalization with gain and bias rows.
    pub fn layer_norm(self, gamma: Tensor<'g>, beta: Tensor<'g>, eps: f64) -> Tensor<'g> {
        self.same_graph(&gamma);
        self.same_graph(&beta);
        let (xv, gv, bv) = (self.value(), gamma.value(), beta.value());
        let (m, h) = xv.shape();
        assert_eq!(gv.shape(), (1, h), "layer_norm gain shape");
        assert_eq!(bv.shape(), (1, h), "layer_norm bias shape");
        let mut xhat = Matrix::zeros(m, h);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Matrix::zeros(m, h);
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            let xr = xhat.row_mut(r);
            for (o, v) in xr.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            let xr = xhat.row(r).to_vec();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = xr[c] * gv.data()[c] + bv.data()[c];
            }
        }
        let keep = self.graph.needs_grad(&[self, gamma, beta]);
        let op = if keep {
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std }
        } else {
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat: Matrix::zeros(0, 0), inv_std: vec![] }
        };
        self.graph.push(out, op)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Tensor<'g> {
        let v = self.value();
        assert!(start + len <= v.cols(), "slice_cols out of range");
        self.graph.push(cols_of(&v, start, len), Op::SliceCols { x: self.id, start })
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Tensor<'g> {
        let v = self.value();
        assert!(start + len <= v.rows(), "slice_rows out of range");
        let c = v.cols();
        let out = Matrix::from_vec(len, c, v.data()[start * c..(start + len) * c].to_vec());
        self.graph.push(out, Op::SliceRows { x: self.id, start })
    }

    /// Mean over rows: `m x c -> 1 x c`. Summation is pairwise, so the
    /// result depends on row order only through round-off.
    pub fn mean_rows(self) -> Tensor<'g> {
        let v = self.value();
        let mut out = Matrix::zeros(1, v.cols());
        let rows: Vec<&[f64]> = (0..v.rows()).map(|r| v.row(r)).collect();
        pairwise_row_sum(&rows, out.data_mut());
        out.scale_assign(1.0 / v.rows() as f64);
        self.graph.push(out, Op::MeanRows(self.id))
    }

    pub fn sum(self) -> Tensor<'g> {
        let s = self.value().sum();
        self.graph.push(Matrix::scalar(s), Op::SumAll(self.id))
    }

    /// Repeats a `1 x c` row `m` times.
    pub fn broadcast_rows(self, m: usize) -> Tensor<'g> {
        let v = self.value();
        assert_eq!(v.rows(), 1, "broadcast_rows needs a row vector");
        let mut data = Vec::with_capacity(m * v.cols());
        for _ in 0..m {
            data.extend_from_slice(v.data());
        }
        self.graph.push(Matrix::from_vec(m, v.cols(), data), Op::BroadcastRows(self.id))
    }
}

fn pairwise_row_sum(rows: &[&[f64]], out: &mut [f64]) {
    match rows.len() {
        0 => {}
        1 => {
            for (o, v) in out.iter_mut().zip(rows[0]) {
                *o += v;
            }
        }
        n if n <= 8 => {
            for row in rows {
                for (o, v) in out.iter_mut().zip(*row) {
                    *o += v;
                }
            }
        }
        n => {
            let (a, b) = rows.split_at(n / 2);
            let mut left = vec![0.0; out.len()];
            let mut right = vec![0.0; out.len()];
            pairwise_row_sum(a, &mut left);
            pairwise_row_sum(b, &mut right);
            for ((o, l), r) in out.iter_mut().zip(&left).zip(&right) {
                *o += l + r;
            }
        }
    }
}
