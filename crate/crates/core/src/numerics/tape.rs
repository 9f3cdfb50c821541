//! Reverse-mode differentiation over a linear record of primitive operations.
//!
//! A [`Tape`] owns every intermediate value produced while it is alive. Each
//! primitive returns a [`Var`] handle; [`Tape::backward`] walks the record in
//! reverse and returns the gradient of a scalar with respect to every leaf
//! that was created with `requires_grad`. Backward never mutates recorded
//! values, so replaying it yields identical gradients.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SelectRows(Vec<(Var, usize)>),
    SegmentSum(Var, Vec<usize>),
    SegmentMax(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    RowScale(Var, Var),
    BlockDiag {
        x: Var,
        w: Var,
        rel: Vec<usize>,
        blocks: usize,
    },
    Softmax(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// How parameters bound onto a tape participate in differentiation.
#[derive(Clone, Debug)]
enum GradMode {
    All,
    None,
    Only(HashSet<ParamId>),
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, Var>>,
    mode: GradMode,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    /// Every bound parameter requires a gradient.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            mode: GradMode::All,
        }
    }

    /// Nothing requires a gradient; primitives only compute values.
    pub fn inference() -> Self {
        Tape {
            mode: GradMode::None,
            ..Tape::new()
        }
    }

    /// Only the listed parameters require gradients; the rest are bound as
    /// constants.
    pub fn with_trainable(ids: impl IntoIterator<Item = ParamId>) -> Self {
        Tape {
            mode: GradMode::Only(ids.into_iter().collect()),
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        // Non-differentiable results drop their inputs from the record.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var {
        let rg = requires_grad && !matches!(self.mode, GradMode::None);
        self.push(t, Op::Leaf, rg)
    }

    /// Binds a stored parameter. Binding the same id twice returns the same
    /// handle so gradients accumulate in one place.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.borrow().get(&id) {
            return v;
        }
        let rg = match &self.mode {
            GradMode::All => true,
            GradMode::None => false,
            GradMode::Only(set) => set.contains(&id),
        };
        let value = store.shared(id);
        let var = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                value,
                op: Op::Leaf,
                requires_grad: rg,
            });
            Var(nodes.len() - 1)
        };
        self.bound.borrow_mut().insert(id, var);
        var
    }

    // ── primitives ──────────────────────────────────────────────────────

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(shape_err("matmul", &av, &bv));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(av.data(), bv.data(), &mut out, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(n, m, out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [n, k]`, `b: [m, k]`.
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return Err(shape_err("matmul_t", &av, &bv));
        }
        let bt = bv.transpose();
        let mut out = vec![0.0; n * m];
        matmul_into(av.data(), bt.data(), &mut out, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(n, m, out), Op::MatMulT(a, b), rg))
    }

    fn zip(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, &av, &bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((
            Tensor::new(av.shape().to_vec(), data)?,
            self.rg(a) || self.rg(b),
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    /// `scale * a + shift`.
    pub fn affine(&self, a: Var, scale: f64, shift: f64) -> Var {
        let t = self.map(a, |x| scale * x + shift);
        self.push(t, Op::Affine(a, scale), self.rg(a))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a), self.rg(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        self.push(t, Op::Tanh(a), self.rg(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let t = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(t, Op::Relu(a), self.rg(a))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let Some(first) = vals.first() else {
            return Err(Error::InvalidTensor("concat of zero tensors".into()));
        };
        let n = first.rows();
        for v in &vals[1..] {
            if v.rows() != n {
                return Err(shape_err("concat", first, v));
            }
        }
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for v in &vals {
                out.extend_from_slice(v.row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::matrix(n, total, out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Rows `a[idx[0]], a[idx[1]], ...`; repeated indices are allowed.
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= av.rows() {
                return Err(Error::IdOutOfRange {
                    kind: "row",
                    id: i,
                    limit: av.rows(),
                });
            }
            out.extend_from_slice(av.row(i));
        }
        Ok(self.push(
            Tensor::matrix(idx.len(), c, out),
            Op::GatherRows(a, idx.to_vec()),
            self.rg(a),
        ))
    }

    /// Stacks single rows drawn from several tensors of equal width.
    pub fn select_rows(&self, sources: &[(Var, usize)], cols: usize) -> Result<Var> {
        let mut out = Vec::with_capacity(sources.len() * cols);
        let mut rg = false;
        for &(v, i) in sources {
            let val = self.value(v);
            if val.cols() != cols {
                return Err(Error::Shape {
                    op: "select_rows",
                    left: val.shape().to_vec(),
                    right: vec![1, cols],
                });
            }
            out.extend_from_slice(val.row(i));
            rg |= self.rg(v);
        }
        Ok(self.push(
            Tensor::matrix(sources.len(), cols, out),
            Op::SelectRows(sources.to_vec()),
            rg,
        ))
    }

    fn check_segments(
        &self,
        name: &'static str,
        av: &Tensor,
        seg: &[usize],
        n: usize,
    ) -> Result<()> {
        if seg.len() != av.rows() {
            return Err(Error::Shape {
                op: name,
                left: av.shape().to_vec(),
                right: vec![seg.len()],
            });
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= n) {
            return Err(Error::IdOutOfRange {
                kind: "segment",
                id: bad,
                limit: n,
            });
        }
        Ok(())
    }

    /// `out[seg[i]] += a[i]` over `n` output rows.
    pub fn segment_sum(&self, a: Var, seg: &[usize], n: usize) -> Result<Var> {
        let av = self.value(a);
        self.check_segments("segment_sum", &av, seg, n)?;
        let c = av.cols();
        let mut out = vec![0.0; n * c];
        for (i, &s) in seg.iter().enumerate() {
            for (o, &x) in out[s * c..(s + 1) * c].iter_mut().zip(av.row(i)) {
                *o += x;
            }
        }
        Ok(self.push(
            Tensor::matrix(n, c, out),
            Op::SegmentSum(a, seg.to_vec()),
            self.rg(a),
        ))
    }

    /// Element-wise max over the rows of each segment; empty segments give 0.
    pub fn segment_max(&self, a: Var, seg: &[usize], n: usize) -> Result<Var> {
        let av = self.value(a);
        self.check_segments("segment_max", &av, seg, n)?;
        let c = av.cols();
        let mut out = vec![f64::NEG_INFINITY; n * c];
        let mut seen = vec![false; n];
        for (i, &s) in seg.iter().enumerate() {
            seen[s] = true;
            for (o, &x) in out[s * c..(s + 1) * c].iter_mut().zip(av.row(i)) {
                if x > *o {
                    *o = x;
                }
            }
        }
        for (s, &hit) in seen.iter().enumerate() {
            if !hit {
                out[s * c..(s + 1) * c].fill(0.0);
            }
        }
        Ok(self.push(
            Tensor::matrix(n, c, out),
            Op::SegmentMax(a, seg.to_vec()),
            self.rg(a),
        ))
    }

    /// Element-wise max over all rows, `[n, c] -> [1, c]`.
    pub fn max_pool(&self, a: Var) -> Result<Var> {
        let rows = self.value(a).rows();
        self.segment_max(a, &vec![0; rows], 1)
    }

    /// Softmax of a column `[e, 1]` taken independently within each segment.
    pub fn segment_softmax(&self, a: Var, seg: &[usize], n: usize) -> Result<Var> {
        let av = self.value(a);
        self.check_segments("segment_softmax", &av, seg, n)?;
        if av.cols() != 1 {
            return Err(Error::Shape {
                op: "segment_softmax",
                left: av.shape().to_vec(),
                right: vec![av.rows(), 1],
            });
        }
        let x = av.data();
        let mut max = vec![f64::NEG_INFINITY; n];
        for (i, &s) in seg.iter().enumerate() {
            max[s] = max[s].max(x[i]);
        }
        let mut out: Vec<f64> = seg
            .iter()
            .enumerate()
            .map(|(i, &s)| (x[i] - max[s]).exp())
            .collect();
        let mut sum = vec![0.0; n];
        for (i, &s) in seg.iter().enumerate() {
            sum[s] += out[i];
        }
        for (i, &s) in seg.iter().enumerate() {
            out[i] /= sum[s];
        }
        let e = out.len();
        Ok(self.push(
            Tensor::matrix(e, 1, out),
            Op::SegmentSoftmax(a, seg.to_vec()),
            self.rg(a),
        ))
    }

    /// Multiplies row `i` of `a` by `s[i]`, with `s: [n, 1]`.
    pub fn row_scale(&self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value(a), self.value(s));
        if sv.rows() != av.rows() || sv.cols() != 1 {
            return Err(shape_err("row_scale", &av, &sv));
        }
        let c = av.cols();
        let mut out = av.data().to_vec();
        for (i, &k) in sv.data().iter().enumerate() {
            for v in &mut out[i * c..(i + 1) * c] {
                *v *= k;
            }
        }
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(Tensor::matrix(av.rows(), c, out), Op::RowScale(a, s), rg))
    }

    /// Applies a per-row block-diagonal linear map.
    ///
    /// `w` is `[num_relations, blocks * bo * bi]`, holding for each relation
    /// the blocks `A_1 .. A_B` (each `bo x bi`, row-major) of
    /// `diag(A_1, ..., A_B)`. Row `e` of `x` (`[E, blocks * bi]`) is mapped
    /// by the matrix of relation `rel[e]` into `[E, out_dim]`.
    pub fn block_diag(
        &self,
        x: Var,
        w: Var,
        rel: &[usize],
        blocks: usize,
        out_dim: usize,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let in_dim = xv.cols();
        if blocks == 0 || in_dim % blocks != 0 || out_dim % blocks != 0 {
            return Err(shape_err("block_diag", &xv, &wv));
        }
        let (bi, bo) = (in_dim / blocks, out_dim / blocks);
        if wv.cols() != blocks * bo * bi || rel.len() != xv.rows() {
            return Err(shape_err("block_diag", &xv, &wv));
        }
        if let Some(&bad) = rel.iter().find(|&&r| r >= wv.rows()) {
            return Err(Error::IdOutOfRange {
                kind: "relation",
                id: bad,
                limit: wv.rows(),
            });
        }
        let mut out = vec![0.0; rel.len() * out_dim];
        for (e, &r) in rel.iter().enumerate() {
            let wr = wv.row(r);
            let xe = xv.row(e);
            let oe = &mut out[e * out_dim..(e + 1) * out_dim];
            for k in 0..blocks {
                let xb = &xe[k * bi..(k + 1) * bi];
                for i in 0..bo {
                    let wrow = &wr[(k * bo + i) * bi..(k * bo + i + 1) * bi];
                    let mut acc = 0.0;
                    for (a, b) in wrow.iter().zip(xb) {
                        acc += a * b;
                    }
                    oe[k * bo + i] = acc;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::matrix(rel.len(), out_dim, out),
            Op::BlockDiag {
                x,
                w,
                rel: rel.to_vec(),
                blocks,
            },
            rg,
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            super::tensor::softmax_in_place(row);
        }
        let t = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::Softmax(a), self.rg(a))
    }

    /// Per-row `-log softmax(logits)[target]`, returned as `[n, 1]`.
    pub fn softmax_cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = lv.data().to_vec();
        let mut loss = Vec::with_capacity(n);
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::TargetOutOfRange {
                    target: t,
                    classes: c,
                });
            }
            let row = lv.row(i);
            let (max, tail) = super::tensor::lse_parts(row);
            let lse = max + tail;
            loss.push((max - row[t]) + tail);
            for (p, &x) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::matrix(n, 1, loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs: if rg { probs } else { Vec::new() },
            },
            rg,
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), self.rg(a))
    }

    // ── reverse pass ────────────────────────────────────────────────────

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires one. Leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = &node.value;
            let val = |v: Var| &nodes[v.0].value;
            let needs = |v: Var| nodes[v.0].requires_grad;
            let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                    if needs(*a) {
                        let bt = bv.transpose();
                        acc(*a, &|ga| matmul_into(&g, bt.data(), ga, n, m, k));
                    }
                    if needs(*b) {
                        let at = av.transpose();
                        acc(*b, &|gb| matmul_into(at.data(), &g, gb, k, n, m));
                    }
                }
                Op::MatMulT(a, b) => {
                    // c = a bᵀ: da = g b, db = gᵀ a
                    let (av, bv) = (val(*a), val(*b));
                    let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                    if needs(*a) {
                        acc(*a, &|ga| matmul_into(&g, bv.data(), ga, n, m, k));
                    }
                    if needs(*b) {
                        let gt = Tensor::matrix(n, m, g.clone()).transpose();
                        acc(*b, &|gb| matmul_into(gt.data(), av.data(), gb, m, n, k));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, &|ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(*b, &|gb| gb.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
                Op::Sub(a, b) => {
                    acc(*a, &|ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(*b, &|gb| gb.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    acc(*a, &|ga| {
                        for ((x, y), z) in ga.iter_mut().zip(&g).zip(bv.data()) {
                            *x += y * z;
                        }
                    });
                    acc(*b, &|gb| {
                        for ((x, y), z) in gb.iter_mut().zip(&g).zip(av.data()) {
                            *x += y * z;
                        }
                    });
                }
                Op::Affine(a, s) => {
                    let s = *s;
                    acc(*a, &|ga| {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += s * y)
                    });
                }
                Op::Sigmoid(a) => acc(*a, &|ga| {
                    for ((x, y), o) in ga.iter_mut().zip(&g).zip(out.data()) {
                        *x += y * o * (1.0 - o);
                    }
                }),
                Op::Tanh(a) => acc(*a, &|ga| {
                    for ((x, y), o) in ga.iter_mut().zip(&g).zip(out.data()) {
                        *x += y * (1.0 - o * o);
                    }
                }),
                Op::Relu(a) => {
                    let av = val(*a);
                    acc(*a, &|ga| {
                        for ((x, y), z) in ga.iter_mut().zip(&g).zip(av.data()) {
                            if *z > 0.0 {
                                *x += y;
                            }
                        }
                    })
                }
                Op::ConcatCols(parts) => {
                    let total = out.cols();
                    let n = out.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let c = val(p).cols();
                        acc(p, &|gp| {
                            for r in 0..n {
                                let src = &g[r * total + offset..r * total + offset + c];
                                for (x, y) in gp[r * c..(r + 1) * c].iter_mut().zip(src) {
                                    *x += y;
                                }
                            }
                        });
                        offset += c;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let c = out.cols();
                    acc(*a, &|ga| {
                        for (r, &src) in idx.iter().enumerate() {
                            for (x, y) in ga[src * c..(src + 1) * c]
                                .iter_mut()
                                .zip(&g[r * c..(r + 1) * c])
                            {
                                *x += y;
                            }
                        }
                    });
                }
                Op::SelectRows(sources) => {
                    let c = out.cols();
                    for (r, &(v, row)) in sources.iter().enumerate() {
                        acc(v, &|gv| {
                            for (x, y) in gv[row * c..(row + 1) * c]
                                .iter_mut()
                                .zip(&g[r * c..(r + 1) * c])
                            {
                                *x += y;
                            }
                        });
                    }
                }
                Op::SegmentSum(a, seg) => {
                    let c = out.cols();
                    acc(*a, &|ga| {
                        for (r, &s) in seg.iter().enumerate() {
                            for (x, y) in ga[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(&g[s * c..(s + 1) * c])
                            {
                                *x += y;
                            }
                        }
                    });
                }
                Op::SegmentMax(a, seg) => {
                    let av = val(*a);
                    let c = out.cols();
                    let n_out = out.rows();
                    // first row attaining the max receives the gradient
                    let mut winner = vec![usize::MAX; n_out * c];
                    for (r, &s) in seg.iter().enumerate() {
                        for j in 0..c {
                            if winner[s * c + j] == usize::MAX
                                && av.data()[r * c + j] == out.data()[s * c + j]
                            {
                                winner[s * c + j] = r;
                            }
                        }
                    }
                    acc(*a, &|ga| {
                        for (slot, &r) in winner.iter().enumerate() {
                            if r != usize::MAX {
                                ga[r * c + slot % c] += g[slot];
                            }
                        }
                    });
                }
                Op::SegmentSoftmax(a, seg) => {
                    let y = out.data();
                    let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; n_seg];
                    for (r, &s) in seg.iter().enumerate() {
                        dot[s] += g[r] * y[r];
                    }
                    acc(*a, &|ga| {
                        for (r, &s) in seg.iter().enumerate() {
                            ga[r] += y[r] * (g[r] - dot[s]);
                        }
                    });
                }
                Op::RowScale(a, s) => {
                    let (av, sv) = (val(*a), val(*s));
                    let c = av.cols();
                    acc(*a, &|ga| {
                        for (r, &k) in sv.data().iter().enumerate() {
                            for (x, y) in ga[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(&g[r * c..(r + 1) * c])
                            {
                                *x += y * k;
                            }
                        }
                    });
                    acc(*s, &|gs| {
                        for (r, x) in gs.iter_mut().enumerate() {
                            let mut d = 0.0;
                            for (y, z) in g[r * c..(r + 1) * c].iter().zip(av.row(r)) {
                                d += y * z;
                            }
                            *x += d;
                        }
                    });
                }
                Op::BlockDiag { x, w, rel, blocks } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let blocks = *blocks;
                    let (in_dim, out_dim) = (xv.cols(), out.cols());
                    let (bi, bo) = (in_dim / blocks, out_dim / blocks);
                    let wc = wv.cols();
                    acc(*x, &|gx| {
                        for (e, &r) in rel.iter().enumerate() {
                            let wr = wv.row(r);
                            let ge = &g[e * out_dim..(e + 1) * out_dim];
                            let gxe = &mut gx[e * in_dim..(e + 1) * in_dim];
                            for k in 0..blocks {
                                for i in 0..bo {
                                    let go = ge[k * bo + i];
                                    let wrow = &wr[(k * bo + i) * bi..(k * bo + i + 1) * bi];
                                    for (xg, wv) in gxe[k * bi..(k + 1) * bi].iter_mut().zip(wrow) {
                                        *xg += go * wv;
                                    }
                                }
                            }
                        }
                    });
                    acc(*w, &|gw| {
                        for (e, &r) in rel.iter().enumerate() {
                            let xe = xv.row(e);
                            let ge = &g[e * out_dim..(e + 1) * out_dim];
                            let gwr = &mut gw[r * wc..(r + 1) * wc];
                            for k in 0..blocks {
                                for i in 0..bo {
                                    let go = ge[k * bo + i];
                                    let base = (k * bo + i) * bi;
                                    for (wg, xv) in gwr[base..base + bi]
                                        .iter_mut()
                                        .zip(&xe[k * bi..(k + 1) * bi])
                                    {
                                        *wg += go * xv;
                                    }
                                }
                            }
                        }
                    });
                }
                Op::Softmax(a) => {
                    let c = out.cols();
                    let y = out.data();
                    acc(*a, &|ga| {
                        for r in 0..out.rows() {
                            let yr = &y[r * c..(r + 1) * c];
                            let gr = &g[r * c..(r + 1) * c];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((x, &yy), &gg) in ga[r * c..(r + 1) * c].iter_mut().zip(yr).zip(gr)
                            {
                                *x += yy * (gg - dot);
                            }
                        }
                    });
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let c = val(*logits).cols();
                    acc(*logits, &|gl| {
                        for (r, &t) in targets.iter().enumerate() {
                            let gr = g[r];
                            for (x, &p) in gl[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(&probs[r * c..(r + 1) * c])
                            {
                                *x += gr * p;
                            }
                            gl[r * c + t] -= gr;
                        }
                    });
                }
                Op::Sum(a) => {
                    let s = g[0];
                    acc(*a, &|ga| ga.iter_mut().for_each(|x| *x += s));
                }
            }
        }

        let mut leaves = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                let t = Tensor::new(node.value.shape().to_vec(), data)?;
                leaves.insert(Var(i), t);
            }
        }
        let params = self
            .bound
            .borrow()
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect();
        Ok(Gradients { leaves, params })
    }
}

/// Result of a reverse pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient for a leaf created with `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    /// Gradient for a bound parameter, if it was trainable on the tape.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.leaves.get(v))
    }

    /// Trainable parameter gradients, ordered by parameter id.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<(ParamId, &Tensor)> = self
            .params
            .iter()
            .filter_map(|(&id, v)| self.leaves.get(v).map(|t| (id, t)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Scales every parameter gradient so the global norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self
            .leaves
            .values()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > max_norm && norm > 0.0 {
            let k = max_norm / norm;
            for t in self.leaves.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
        norm
    }
}
