//! Eager reverse-mode differentiation over [`Tensor2`] values.
//!
//! Every operation computes its value immediately and appends a node to the
//! tape. [`Graph::backward`] walks the tape in reverse and applies the
//! hand-derived adjoint of each op. Parameter leaves remember the store entry
//! they were copied from so their gradients can be pushed back afterwards.
//!
//! Shape errors here are programming errors in the model code and panic.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::NumericError;
use crate::params::ParamStore;
use crate::tensor::{matmul_nt_acc, matmul_raw, matmul_tn_acc, sigmoid, Tensor2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    /// `x + b` with `b` a 1×n row broadcast over the rows of `x`.
    AddBias(Var, Var),
    Add(Var, Var),
    Hadamard(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gather(Var, Rc<[usize]>),
    /// Rows `start..end`.
    RowSlice(Var, usize, usize),
    Concat(Vec<Var>),
    /// Row `i` of the output sums input rows `offsets[i]..offsets[i + 1]`.
    SegmentSum(Var, Rc<[usize]>),
    /// Softmax of a K×1 column within each contiguous segment.
    SegmentSoftmax(Var, Rc<[usize]>),
    /// Row `k` of `x` times the scalar `s[k]` (s is K×1).
    ScaleRows(Var, Var),
    /// Row from the first input where the mask is set, else from the second.
    SelectRows(Var, Var, Rc<[bool]>),
    /// Zero every row whose mask entry is false.
    MaskRows(Var, Rc<[bool]>),
    /// `Σ_r w_r ‖x_r − target_r‖²` as a 1×1 value.
    WeightedSqError(Var, Tensor2, Vec<f64>),
    Scale(Var, f64),
    Sum(Vec<Var>),
}

struct Node {
    value: Tensor2,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor2, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf bound to a store entry. Binding the same name twice returns the
    /// same variable.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, NumericError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Param, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "matmul {:?} x {:?}", av.shape(), bv.shape());
        let out = matmul_raw(av, bv);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.rows(), 1);
        assert_eq!(xv.cols(), bv.cols());
        let mut out = xv.clone();
        let bias = bv.data();
        for r in 0..out.rows() {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(out, Op::AddBias(x, b), ng)
    }

    /// `x·w + b`
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b)).expect("add shapes");
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).hadamard(self.value(b)).expect("hadamard shapes");
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Hadamard(a, b), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let ng = self.needs(x);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn gather(&mut self, x: Var, rows: Rc<[usize]>) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows.iter() {
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor2::from_raw(rows.len(), cols, data);
        let ng = self.needs(x);
        self.push(out, Op::Gather(x, rows), ng)
    }

    /// Rows `start..end` of `x`, e.g. one block of a stacked weight matrix.
    pub fn row_slice(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        assert!(start <= end && end <= xv.rows(), "row slice out of range");
        let cols = xv.cols();
        let out = Tensor2::from_raw(end - start, cols, xv.data()[start * cols..end * cols].to_vec());
        let ng = self.needs(x);
        self.push(out, Op::RowSlice(x, start, end), ng)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat row mismatch");
                data.extend_from_slice(pv.row(r));
            }
        }
        let out = Tensor2::from_raw(rows, cols, data);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::Concat(parts.to_vec()), ng)
    }

    pub fn segment_sum(&mut self, x: Var, offsets: Rc<[usize]>) -> Var {
        let xv = self.value(x);
        let segments = offsets.len() - 1;
        assert_eq!(*offsets.last().unwrap(), xv.rows());
        let cols = xv.cols();
        let mut out = Tensor2::zeros(segments, cols);
        for s in 0..segments {
            let acc = out.row_mut(s);
            for k in offsets[s]..offsets[s + 1] {
                for (a, &v) in acc.iter_mut().zip(xv.row(k)) {
                    *a += v;
                }
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::SegmentSum(x, offsets), ng)
    }

    pub fn segment_softmax(&mut self, x: Var, offsets: Rc<[usize]>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.cols(), 1);
        assert_eq!(*offsets.last().unwrap(), xv.rows());
        let mut out = Tensor2::zeros(xv.rows(), 1);
        for s in 0..offsets.len() - 1 {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if lo == hi {
                continue;
            }
            let seg = &xv.data()[lo..hi];
            let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out.data_mut()[lo..hi];
            let mut total = 0.0;
            for (d, &u) in dst.iter_mut().zip(seg) {
                *d = (u - max).exp();
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        let ng = self.needs(x);
        self.push(out, Op::SegmentSoftmax(x, offsets), ng)
    }

    pub fn scale_rows(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        assert_eq!(sv.shape(), (xv.rows(), 1));
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let k = sv.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
        let ng = self.needs(x) || self.needs(s);
        self.push(out, Op::ScaleRows(x, s), ng)
    }

    pub fn select_rows(&mut self, a: Var, b: Var, mask: Rc<[bool]>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        assert_eq!(mask.len(), av.rows());
        let mut out = bv.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(r).copy_from_slice(av.row(r));
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::SelectRows(a, b, mask), ng)
    }

    pub fn mask_rows(&mut self, x: Var, mask: Rc<[bool]>) -> Var {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.rows());
        let mut out = xv.clone();
        for (r, &m) in mask.iter().enumerate() {
            if !m {
                out.row_mut(r).fill(0.0);
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::MaskRows(x, mask), ng)
    }

    pub fn weighted_sq_error(&mut self, x: Var, target: Tensor2, weights: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape());
        assert_eq!(weights.len(), xv.rows());
        let mut total = 0.0;
        for (r, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let d: f64 = xv
                .row(r)
                .iter()
                .zip(target.row(r))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += w * d;
        }
        let ng = self.needs(x);
        self.push(
            Tensor2::from_raw(1, 1, vec![total]),
            Op::WeightedSqError(x, target, weights),
            ng,
        )
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let first = self.value(parts[0]).shape();
        let mut out = Tensor2::zeros(first.0, first.1);
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.shape(), first);
            for (o, &v) in out.data_mut().iter_mut().zip(pv.data()) {
                *o += v;
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::Sum(parts.to_vec()), ng)
    }

    /// Reverse pass from `root` seeded with `seed` on every entry of the
    /// root (normally a 1×1 loss and seed 1).
    pub fn backward(&self, root: Var, seed: f64) -> Gradients {
        let mut grads: Vec<Option<Tensor2>> = (0..=root.0).map(|_| None).collect();
        let rv = self.value(root);
        grads[root.0] = Some(Tensor2::filled(rv.rows(), rv.cols(), seed));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor2>], v: Var) -> Option<&'g mut Tensor2> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor2::zeros(shape.0, shape.1)))
    }

    fn propagate(&self, node: &Node, dy: &Tensor2, grads: &mut [Option<Tensor2>]) {
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_nt_acc(ga, dy, bv);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_tn_acc(gb, av, dy);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, dy);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let gbd = gb.data_mut();
                    for r in 0..dy.rows() {
                        for (g, &d) in gbd.iter_mut().zip(dy.row(r)) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, dy);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    add_into(gb, dy);
                }
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((g, &d), &o) in ga.data_mut().iter_mut().zip(dy.data()).zip(bv.data()) {
                        *g += d * o;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((g, &d), &o) in gb.data_mut().iter_mut().zip(dy.data()).zip(av.data()) {
                        *g += d * o;
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((g, &d), &s) in gx.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                        *g += d * s * (1.0 - s);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((g, &d), &t) in gx.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                        *g += d * (1.0 - t * t);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((g, &d), &v) in gx.data_mut().iter_mut().zip(dy.data()).zip(xv.data()) {
                        if v > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Gather(x, rows) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (k, &r) in rows.iter().enumerate() {
                        for (g, &d) in gx.row_mut(r).iter_mut().zip(dy.row(k)) {
                            *g += d;
                        }
                    }
                }
            }
            Op::RowSlice(x, start, end) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let cols = gx.cols();
                    let dst = &mut gx.data_mut()[start * cols..end * cols];
                    for (g, &d) in dst.iter_mut().zip(dy.data()) {
                        *g += d;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut col = 0;
                for &p in parts {
                    let width = self.value(p).cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..dy.rows() {
                            let src = &dy.row(r)[col..col + width];
                            for (g, &d) in gp.row_mut(r).iter_mut().zip(src) {
                                *g += d;
                            }
                        }
                    }
                    col += width;
                }
            }
            Op::SegmentSum(x, offsets) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for s in 0..offsets.len() - 1 {
                        for k in offsets[s]..offsets[s + 1] {
                            for (g, &d) in gx.row_mut(k).iter_mut().zip(dy.row(s)) {
                                *g += d;
                            }
                        }
                    }
                }
            }
            Op::SegmentSoftmax(x, offsets) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for s in 0..offsets.len() - 1 {
                        let (lo, hi) = (offsets[s], offsets[s + 1]);
                        let ys = &y.data()[lo..hi];
                        let ds = &dy.data()[lo..hi];
                        let dot: f64 = ys.iter().zip(ds).map(|(a, b)| a * b).sum();
                        for (k, g) in gx.data_mut()[lo..hi].iter_mut().enumerate() {
                            *g += ys[k] * (ds[k] - dot);
                        }
                    }
                }
            }
            Op::ScaleRows(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..dy.rows() {
                        let k = sv.data()[r];
                        for (g, &d) in gx.row_mut(r).iter_mut().zip(dy.row(r)) {
                            *g += d * k;
                        }
                    }
                }
                if let Some(gs) = self.acc(grads, *s) {
                    for r in 0..dy.rows() {
                        let dot: f64 = dy.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum();
                        gs.data_mut()[r] += dot;
                    }
                }
            }
            Op::SelectRows(a, b, mask) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for (g, &d) in ga.row_mut(r).iter_mut().zip(dy.row(r)) {
                                *g += d;
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            for (g, &d) in gb.row_mut(r).iter_mut().zip(dy.row(r)) {
                                *g += d;
                            }
                        }
                    }
                }
            }
            Op::MaskRows(x, mask) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for (g, &d) in gx.row_mut(r).iter_mut().zip(dy.row(r)) {
                                *g += d;
                            }
                        }
                    }
                }
            }
            Op::WeightedSqError(x, target, weights) => {
                let xv = self.value(*x);
                let seed = dy.data()[0];
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let row = gx.row_mut(r);
                        for c in 0..row.len() {
                            row[c] += seed * 2.0 * w * (xv.get(r, c) - target.get(r, c));
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (g, &d) in gx.data_mut().iter_mut().zip(dy.data()) {
                        *g += d * s;
                    }
                }
            }
            Op::Sum(parts) => {
                for &p in parts {
                    if let Some(gp) = self.acc(grads, p) {
                        add_into(gp, dy);
                    }
                }
            }
        }
    }

    /// Adds the gradient of every bound parameter into `store`.
    pub fn accumulate_param_grads(
        &self,
        grads: &Gradients,
        store: &mut ParamStore,
    ) -> Result<(), NumericError> {
        for (name, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }
}

fn add_into(acc: &mut Tensor2, d: &Tensor2) {
    for (a, &b) in acc.data_mut().iter_mut().zip(d.data()) {
        *a += b;
    }
}
