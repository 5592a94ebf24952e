//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! matrices.
//!
//! Every value on the tape is a 2-D matrix (row vectors are `1×n`). Nodes are
//! appended in evaluation order, so the tape index is a valid topological
//! order and [`Tape::backward`] is a single reverse sweep. Nodes that depend
//! on no parameter are marked as not requiring gradients and are skipped.
//!
//! The op set is exactly what the model needs: dense products, gates and
//! activations, row/column plumbing, row-wise layer norm, a fused
//! prefix-conditioned causal attention, a symmetric positive definite solve
//! (which carries all pseudo-inverse gradients), distances and a fused
//! log-softmax cross entropy.

use ndarray::{s, Array2, Axis, Zip};

use crate::linalg::{cholesky, cholesky_solve, Mat};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row segment of a packed sequence batch: rows `start..start+len` form one
/// causal sequence conditioned on prefix row `prefix`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub prefix: usize,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    RowDist(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize, f64)>,
        probs: Mat,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Mat,
        inv_std: Vec<f64>,
    },
    SolveSpd {
        g: Var,
        r: Var,
        chol: Mat,
    },
    StraightThrough(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        pk: Var,
        pv: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<Mat>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}

const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
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
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradient.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Param, true)
    }

    /// Same value as `v`, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul {:?} x {:?}",
            va.dim(),
            vb.dim()
        );
        let out = va.dot(vb);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn t(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add");
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub");
        let out = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul");
        let out = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `a (n×k) + row (1×k)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.nrows(), 1, "add_row bias must be a row");
        assert_eq!(va.ncols(), vr.ncols(), "add_row width");
        let out = va + vr;
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// `a (n×k) ⊙ col (n×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert_eq!(vc.ncols(), 1, "mul_col factor must be a column");
        assert_eq!(va.nrows(), vc.nrows(), "mul_col height");
        let out = va * vc;
        let ng = self.ng(a) || self.ng(col);
        self.push(out, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + c` elementwise.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        let ng = self.ng(a);
        self.push(out, Op::AddConst(a), ng)
    }

    /// `1 − a` elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, 1.0)
    }

    /// `a + λ I` for a square matrix.
    pub fn add_diag(&mut self, a: Var, lambda: f64) -> Var {
        let out = crate::linalg::add_diag(self.value(a), lambda);
        let ng = self.ng(a);
        self.push(out, Op::AddConst(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols heights differ");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows widths differ");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let va = self.value(a);
        let mut out = Mat::zeros((idx.len(), va.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&va.row(i));
        }
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx.to_vec()), ng)
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.gather_rows(a, &[i])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    /// Sums a list of `1×1` scalars; an empty list gives a constant zero.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        match parts.split_first() {
            None => self.constant(Mat::zeros((1, 1))),
            Some((first, rest)) => rest.iter().fold(*first, |acc, p| self.add(acc, *p)),
        }
    }

    /// Euclidean distance of every row of `a` to the single row `p` (`n×1`).
    pub fn row_dist(&mut self, a: Var, p: Var) -> Var {
        let (va, vp) = (self.value(a), self.value(p));
        assert_eq!(vp.nrows(), 1, "row_dist point must be a row");
        assert_eq!(va.ncols(), vp.ncols(), "row_dist width");
        let d = va - vp;
        let out = d
            .map_axis(Axis(1), |r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .insert_axis(Axis(1));
        let ng = self.ng(a) || self.ng(p);
        self.push(out, Op::RowDist(a, p), ng)
    }

    /// Sum over `(row, target)` pairs of `−ln softmax(logits[row])[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Var {
        let weighted: Vec<(usize, usize, f64)> = targets.iter().map(|&(r, t)| (r, t, 1.0)).collect();
        self.weighted_cross_entropy(logits, &weighted)
    }

    /// Weighted sum over `(row, target, weight)` of `−ln softmax(logits[row])[target]`.
    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: &[(usize, usize, f64)]) -> Var {
        let vl = self.value(logits);
        let mut rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
        rows.sort_unstable();
        rows.dedup();
        let mut probs = Mat::zeros(vl.dim());
        let mut lse = vec![0.0; vl.nrows()];
        for &r in &rows {
            let row = vl.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            for (c, x) in row.iter().enumerate() {
                probs[[r, c]] = (x - m).exp() / z;
            }
            lse[r] = m + z.ln();
        }
        let total: f64 = targets.iter().map(|&(r, t, w)| w * (lse[r] - vl[[r, t]])).sum();
        let ng = self.ng(logits);
        self.push(
            Array2::from_elem((1, 1), total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let k = vx.ncols() as f64;
        let mut normed = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.nrows());
        for mut row in normed.axis_iter_mut(Axis(0)) {
            let mean = row.sum() / k;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &normed * self.value(gain) + self.value(bias);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            ng,
        )
    }

    /// `G⁻¹ R` for symmetric positive definite `G`.
    ///
    /// Panics if `G` is not numerically positive definite; callers add a ridge.
    pub fn solve_spd(&mut self, g: Var, r: Var) -> Var {
        let chol = cholesky(&self.value(g).view()).expect("solve_spd: matrix not positive definite");
        let out = cholesky_solve(&chol, &self.value(r).view());
        let ng = self.ng(g) || self.ng(r);
        self.push(out, Op::SolveSpd { g, r, chol }, ng)
    }

    /// Forward value of `hard`; backward passes the incoming gradient to both
    /// `hard` and `soft` unchanged.
    pub fn straight_through(&mut self, hard: Var, soft: Var) -> Var {
        assert_eq!(self.shape(hard), self.shape(soft), "straight_through");
        let out = self.value(hard).clone();
        let ng = self.ng(hard) || self.ng(soft);
        self.push(out, Op::StraightThrough(hard, soft), ng)
    }

    /// Multi-head causal self-attention over packed segments, each segment
    /// additionally attending to one prefix key/value row (`pk`, `pv`).
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        pk: Var,
        pv: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Var {
        let (vq, vk, vv, vpk, vpv) = (
            self.value(q),
            self.value(k),
            self.value(v),
            self.value(pk),
            self.value(pv),
        );
        let (n, d) = vq.dim();
        assert!(d % heads == 0, "attention width {d} not divisible by {heads} heads");
        assert_eq!(vk.dim(), (n, d));
        assert_eq!(vv.dim(), (n, d));
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((n, d));
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            for h in 0..heads {
                let c0 = h * dh;
                let mut p = Mat::zeros((seg.len, seg.len + 1));
                for t in 0..seg.len {
                    let i = seg.start + t;
                    let qi = vq.slice(s![i, c0..c0 + dh]);
                    let mut scores = Vec::with_capacity(t + 2);
                    scores.push(qi.dot(&vpk.slice(s![seg.prefix, c0..c0 + dh])) * scale);
                    for j in 0..=t {
                        scores.push(qi.dot(&vk.slice(s![seg.start + j, c0..c0 + dh])) * scale);
                    }
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|x| (x - m).exp()).sum();
                    for (j, sc) in scores.iter().enumerate() {
                        p[[t, j]] = (sc - m).exp() / z;
                    }
                    let mut o = out.slice_mut(s![i, c0..c0 + dh]);
                    o.scaled_add(p[[t, 0]], &vpv.slice(s![seg.prefix, c0..c0 + dh]));
                    for j in 0..=t {
                        o.scaled_add(p[[t, j + 1]], &vv.slice(s![seg.start + j, c0..c0 + dh]));
                    }
                }
                probs.push(p);
            }
        }
        let ng = [q, k, v, pk, pv].iter().any(|x| self.ng(*x));
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                pk,
                pv,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            ng,
        )
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array2::ones((1, 1)));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Param => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Mat>], v: Var, f: impl FnOnce(&mut Mat)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Mat::zeros(self.nodes[v.0].value.dim()));
        }
        f(slot.as_mut().unwrap());
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let ga = g.dot(&self.value(*b).t());
                    self.acc(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = self.value(*a).t().dot(g);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.t().to_owned()),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*row) {
                    self.acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, col) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g * self.value(*col));
                }
                if self.ng(*col) {
                    let gc = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.acc(grads, *col, gc);
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g * *c),
            Op::AddConst(a) => self.acc(grads, *a, g.clone()),
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(y).for_each(|gv, &yv| *gv *= yv * (1.0 - yv));
                self.acc(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(y).for_each(|gv, &yv| *gv *= 1.0 - yv * yv);
                self.acc(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|gv, &xv| *gv *= gelu_grad(xv));
                self.acc(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut c = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.ng(*p) {
                        self.acc(grads, *p, g.slice(s![.., c..c + w]).to_owned());
                    }
                    c += w;
                }
            }
            Op::SliceCols(a, start) => {
                let w = g.ncols();
                let start = *start;
                self.acc_with(grads, *a, |ga| {
                    let mut view = ga.slice_mut(s![.., start..start + w]);
                    view += g;
                });
            }
            Op::ConcatRows(parts) => {
                let mut r = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    if self.ng(*p) {
                        self.acc(grads, *p, g.slice(s![r..r + h, ..]).to_owned());
                    }
                    r += h;
                }
            }
            Op::GatherRows(a, idx) => {
                self.acc_with(grads, *a, |ga| {
                    for (r, &src) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(r);
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[[0, 0]];
                let shape = self.value(*a).dim();
                self.acc(grads, *a, Array2::from_elem(shape, gv));
            }
            Op::RowDist(a, p) => {
                let va = self.value(*a);
                let vp = self.value(*p);
                let mut ga = va - vp;
                for (r, mut row) in ga.axis_iter_mut(Axis(0)).enumerate() {
                    let d = y[[r, 0]];
                    let f = if d > 0.0 { g[[r, 0]] / d } else { 0.0 };
                    row.mapv_inplace(|x| x * f);
                }
                if self.ng(*p) {
                    let gp = -ga.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *p, gp);
                }
                self.acc(grads, *a, ga);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let gv = g[[0, 0]];
                let mut gl = Mat::zeros(probs.dim());
                let mut mass = vec![0.0; probs.nrows()];
                for &(r, t, w) in targets {
                    mass[r] += w;
                    gl[[r, t]] -= gv * w;
                }
                for (r, &w) in mass.iter().enumerate() {
                    if w != 0.0 {
                        let mut row = gl.row_mut(r);
                        row.scaled_add(gv * w, &probs.row(r));
                    }
                }
                self.acc(grads, *logits, gl);
            }
            Op::Softmax(a) => {
                let mut ga = g * y;
                for (r, mut row) in ga.axis_iter_mut(Axis(0)).enumerate() {
                    let dot: f64 = row.sum();
                    let yr = y.row(r);
                    Zip::from(&mut row).and(&yr).for_each(|gv, &yv| *gv -= yv * dot);
                }
                self.acc(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let vg = self.value(*gain);
                if self.ng(*gain) {
                    self.acc(grads, *gain, (g * normed).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*bias) {
                    self.acc(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*x) {
                    let k = g.ncols() as f64;
                    let dxhat = g * vg;
                    let mut gx = Mat::zeros(g.dim());
                    for r in 0..g.nrows() {
                        let dr = dxhat.row(r);
                        let nr = normed.row(r);
                        let mean_d = dr.sum() / k;
                        let mean_dn = dr.dot(&nr) / k;
                        for c in 0..g.ncols() {
                            gx[[r, c]] = inv_std[r] * (dr[c] - mean_d - nr[c] * mean_dn);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::SolveSpd { g: gm, r, chol } => {
                let gr = cholesky_solve(chol, &g.view());
                if self.ng(*gm) {
                    let gg = -gr.dot(&y.t());
                    self.acc(grads, *gm, gg);
                }
                self.acc(grads, *r, gr);
            }
            Op::StraightThrough(hard, soft) => {
                self.acc(grads, *hard, g.clone());
                self.acc(grads, *soft, g.clone());
            }
            Op::Attention {
                q,
                k,
                v,
                pk,
                pv,
                segments,
                heads,
                probs,
            } => {
                let (vq, vk, vv, vpk, vpv) = (
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    self.value(*pk),
                    self.value(*pv),
                );
                let d = vq.ncols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Mat::zeros(vq.dim());
                let mut gk = Mat::zeros(vk.dim());
                let mut gv = Mat::zeros(vv.dim());
                let mut gpk = Mat::zeros(vpk.dim());
                let mut gpv = Mat::zeros(vpv.dim());
                let mut pi = 0;
                for seg in segments {
                    for h in 0..*heads {
                        let p = &probs[pi];
                        pi += 1;
                        let c0 = h * dh;
                        let cols = c0..c0 + dh;
                        for t in 0..seg.len {
                            let i = seg.start + t;
                            let go = g.slice(s![i, cols.clone()]);
                            // dP_j = go · v_j
                            let mut dp = Vec::with_capacity(t + 2);
                            dp.push(go.dot(&vpv.slice(s![seg.prefix, cols.clone()])));
                            for j in 0..=t {
                                dp.push(go.dot(&vv.slice(s![seg.start + j, cols.clone()])));
                            }
                            let mut inner = 0.0;
                            for (j, dpj) in dp.iter().enumerate() {
                                inner += p[[t, j]] * dpj;
                            }
                            // value grads
                            gpv.slice_mut(s![seg.prefix, cols.clone()])
                                .scaled_add(p[[t, 0]], &go);
                            for j in 0..=t {
                                gv.slice_mut(s![seg.start + j, cols.clone()])
                                    .scaled_add(p[[t, j + 1]], &go);
                            }
                            // score grads
                            let qi = vq.slice(s![i, cols.clone()]);
                            let ds0 = p[[t, 0]] * (dp[0] - inner) * scale;
                            gq.slice_mut(s![i, cols.clone()])
                                .scaled_add(ds0, &vpk.slice(s![seg.prefix, cols.clone()]));
                            gpk.slice_mut(s![seg.prefix, cols.clone()]).scaled_add(ds0, &qi);
                            for j in 0..=t {
                                let ds = p[[t, j + 1]] * (dp[j + 1] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let row = seg.start + j;
                                gq.slice_mut(s![i, cols.clone()])
                                    .scaled_add(ds, &vk.slice(s![row, cols.clone()]));
                                gk.slice_mut(s![row, cols.clone()]).scaled_add(ds, &qi);
                            }
                        }
                    }
                }
                self.acc(grads, *q, gq);
                self.acc(grads, *k, gk);
                self.acc(grads, *v, gv);
                self.acc(grads, *pk, gpk);
                self.acc(grads, *pv, gpv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of every parameter entry of a tape-built
    /// scalar function.
    fn check(params: Vec<Mat>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let eps = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            let analytic = grads
                .get(vars[pi])
                .cloned()
                .unwrap_or_else(|| Mat::zeros(p.dim()));
            for idx in 0..p.len() {
                let eval = |delta: f64| {
                    let mut ps = params.clone();
                    let flat = ps[pi].as_slice_mut().unwrap();
                    flat[idx] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
                    let o = f(&mut t, &vs);
                    t.scalar(o)
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let an = analytic.as_slice().unwrap()[idx];
                let err = (fd - an).abs() / (1.0 + fd.abs().max(an.abs()));
                assert!(err < 1e-6, "param {pi} entry {idx}: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn matmul_and_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        let bias = rand_mat(&mut rng, 1, 2);
        check(vec![a, b, bias], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let m = t.add_row(m, v[2]);
            let s = t.sigmoid(m);
            let th = t.tanh(m);
            let p = t.mul(s, th);
            let g = t.gelu(p);
            let om = t.one_minus(g);
            t.sum(om)
        });
    }

    #[test]
    fn rows_and_cols_plumbing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 4, 3);
        let c = rand_mat(&mut rng, 4, 1);
        check(vec![a, c], |t, v| {
            let g = t.gather_rows(v[0], &[2, 0, 2]);
            let at = t.t(v[0]);
            let atx = t.matmul(at, v[1]);
            let atx = t.t(atx);
            let cat = t.concat_rows(&[g, atx]);
            let cc = t.concat_cols(&[cat, cat]);
            let sl = t.slice_cols(cc, 2, 3);
            let sq = t.mul(sl, sl);
            let m = t.mul_col(v[0], v[1]);
            let s1 = t.sum(sq);
            let s2 = t.sum(m);
            let s = t.add(s1, s2);
            t.scale(s, 0.5)
        });
    }

    #[test]
    fn row_dist_softmax_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 5, 3);
        let p = rand_mat(&mut rng, 1, 3);
        check(vec![a, p], |t, v| {
            let d = t.row_dist(v[0], v[1]);
            let dt = t.t(d);
            let neg = t.neg(dt);
            let ce = t.cross_entropy(neg, &[(0, 3)]);
            let sm = t.softmax_rows(neg);
            let w = t.matmul(sm, v[0]);
            let ws = t.sum(w);
            t.add(ce, ws)
        });
    }

    #[test]
    fn weighted_cross_entropy_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = rand_mat(&mut rng, 4, 6);
        check(vec![logits], |t, v| {
            t.weighted_cross_entropy(v[0], &[(0, 1, 0.5), (2, 5, 2.0), (2, 0, 0.25)])
        });
    }

    #[test]
    fn layer_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(&mut rng, 3, 5);
        let g = rand_mat(&mut rng, 1, 5);
        let b = rand_mat(&mut rng, 1, 5);
        let w = rand_mat(&mut rng, 5, 2);
        check(vec![x, g, b, w], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            let z = t.matmul(y, v[3]);
            let z = t.tanh(z);
            t.sum(z)
        });
    }

    #[test]
    fn solve_spd_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_mat(&mut rng, 6, 3);
        let r = rand_mat(&mut rng, 3, 2);
        check(vec![a, r], |t, v| {
            let at = t.t(v[0]);
            let g = t.matmul(at, v[0]);
            let g = t.add_diag(g, 0.1);
            let x = t.solve_spd(g, v[1]);
            let x = t.tanh(x);
            t.sum(x)
        });
    }

    #[test]
    fn attention_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = rand_mat(&mut rng, 5, 4);
        let k = rand_mat(&mut rng, 5, 4);
        let vv = rand_mat(&mut rng, 5, 4);
        let pk = rand_mat(&mut rng, 2, 4);
        let pv = rand_mat(&mut rng, 2, 4);
        let w = rand_mat(&mut rng, 4, 4);
        let segs = vec![
            Segment { start: 0, len: 3, prefix: 0 },
            Segment { start: 3, len: 2, prefix: 1 },
        ];
        check(vec![q, k, vv, pk, pv, w], move |t, v| {
            let o = t.attention(v[0], v[1], v[2], v[3], v[4], &segs, 2);
            let o = t.matmul(o, v[5]);
            let o = t.tanh(o);
            t.sum(o)
        });
    }

    #[test]
    fn straight_through_forward_is_hard_value() {
        let mut t = Tape::new();
        let h = t.param(array![[1.0, 2.0]]);
        let s = t.param(array![[0.3, -0.7]]);
        let o = t.straight_through(h, s);
        assert_eq!(t.value(o), t.value(h));
        let w = t.constant(array![[2.0], [3.0]]);
        let y = t.matmul(o, w);
        let y = t.sum(y);
        let g = t.backward(y);
        assert_eq!(g.get(h).unwrap(), &array![[2.0, 3.0]]);
        assert_eq!(g.get(s).unwrap(), &array![[2.0, 3.0]]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(array![[1.0, 2.0]]);
        let p = t.param(array![[3.0, 4.0]]);
        let m = t.mul(c, p);
        let s = t.sum(m);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &array![[1.0, 2.0]]);
    }
}
