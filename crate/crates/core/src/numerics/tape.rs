//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! A forward pass appends nodes; `gradients` walks the tape backwards once and
//! returns the cotangent of every node. Parameter leaves remember which
//! [`ParamSet`] they came from so gradients can be accumulated into it.

use std::collections::HashMap;

use super::matrix::Matrix;
use super::params::{ParamId, ParamSet};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param { tag: u64, id: ParamId },
    MatMul(Var, Var),
    /// `[R,C] + [1,C]`
    AddRow(Var, Var),
    /// `[R,C] * [1,C]`
    MulRow(Var, Var),
    /// `[R,C] * [R,1]`
    MulCol(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Elu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SelectRows { x: Var, idx: Vec<usize> },
    SumCols(Var),
    SumAll(Var),
    GroupLogSoftmax { x: Var, classes: usize },
    StraightThrough { probs: Var },
    FloorAt { x: Var, floor: f64 },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_cache: HashMap<(u64, ParamId), Var>,
}

/// Cotangents of every node on a tape, produced by [`Tape::gradients`].
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    /// Gradient with respect to `v`, or `None` if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

fn elementwise_check(a: &Matrix, b: &Matrix, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// A leaf whose gradient is available through [`Grads::wrt`] but is never
    /// written into a parameter set.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        let key = (set.tag(), id);
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let v = self.push(set.value(id).clone(), Op::Param { tag: set.tag(), id });
        self.param_cache.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(bias));
        assert_eq!(bm.rows(), 1, "add_row expects a 1xC bias");
        assert_eq!(am.cols(), bm.cols(), "add_row width mismatch");
        let mut out = am.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bm.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, bias))
    }

    pub fn mul_row(&mut self, a: Var, gain: Var) -> Var {
        let (am, gm) = (self.value(a), self.value(gain));
        assert_eq!(gm.rows(), 1, "mul_row expects a 1xC gain");
        assert_eq!(am.cols(), gm.cols(), "mul_row width mismatch");
        let mut out = am.clone();
        for r in 0..out.rows() {
            for (o, g) in out.row_mut(r).iter_mut().zip(gm.data()) {
                *o *= g;
            }
        }
        self.push(out, Op::MulRow(a, gain))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (am, cm) = (self.value(a), self.value(col));
        assert_eq!(cm.cols(), 1, "mul_col expects an Rx1 column");
        assert_eq!(am.rows(), cm.rows(), "mul_col height mismatch");
        let mut out = am.clone();
        for r in 0..out.rows() {
            let s = cm.get(r, 0);
            out.row_mut(r).iter_mut().for_each(|o| *o *= s);
        }
        self.push(out, Op::MulCol(a, col))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        elementwise_check(self.value(a), self.value(b), "add");
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        elementwise_check(self.value(a), self.value(b), "sub");
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        elementwise_check(self.value(a), self.value(b), "mul");
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.push(out, Op::Elu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols;
            row.iter_mut().for_each(|v| *v -= mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / cols;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v *= is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x: a, inv_std })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::hconcat(&mats);
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_cols(start, len);
        self.push(out, Op::SliceCols { x: a, start })
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select_rows(idx);
        self.push(
            out,
            Op::SelectRows {
                x: a,
                idx: idx.to_vec(),
            },
        )
    }

    /// Sum over columns: `[R,C] -> [R,1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).row_sums();
        self.push(out, Op::SumCols(a))
    }

    /// Sum of all entries: `[R,C] -> [1,1]`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Log-softmax within consecutive column groups of width `classes`.
    pub fn group_log_softmax(&mut self, a: Var, classes: usize) -> Var {
        let x = self.value(a);
        assert!(
            classes > 0 && x.cols() % classes == 0,
            "group_log_softmax: {} columns not divisible by {}",
            x.cols(),
            classes
        );
        let mut out = x.clone();
        for r in 0..out.rows() {
            for g in out.row_mut(r).chunks_mut(classes) {
                let m = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + g.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                g.iter_mut().for_each(|v| *v -= lse);
            }
        }
        self.push(out, Op::GroupLogSoftmax { x: a, classes })
    }

    /// Straight-through sample: forward value `sample + probs - anchor`,
    /// backward passes the cotangent to `probs` unchanged.
    ///
    /// With `anchor` equal to the current probabilities the forward value is
    /// exactly the one-hot sample.
    pub fn straight_through(&mut self, probs: Var, sample: &Matrix, anchor: &Matrix) -> Var {
        let p = self.value(probs);
        assert_eq!(p.shape(), sample.shape(), "straight_through shape mismatch");
        assert_eq!(p.shape(), anchor.shape(), "straight_through anchor mismatch");
        let mut out = sample.clone();
        for ((o, pv), av) in out.data_mut().iter_mut().zip(p.data()).zip(anchor.data()) {
            // Exact cancellation keeps the forward value bit-equal to the sample.
            if pv != av {
                *o += pv - av;
            }
        }
        self.push(out, Op::StraightThrough { probs })
    }

    /// `max(x, floor)` elementwise; gradient flows only where `x > floor`.
    pub fn floor_at(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|x| x.max(floor));
        self.push(out, Op::FloorAt { x: a, floor })
    }

    /// Reverse sweep seeded with the given cotangents.
    pub fn gradients(&self, seeds: &[(Var, Matrix)]) -> Grads {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(
                self.value(*v).shape(),
                g.shape(),
                "seed cotangent shape mismatch"
            );
            accumulate(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    /// Backpropagates a scalar `loss` and adds the parameter gradients that
    /// belong to `set` into its gradient slots.
    pub fn backward(&self, loss: Var, set: &mut ParamSet) {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be a scalar");
        let grads = self.gradients(&[(loss, Matrix::scalar(1.0))]);
        self.accumulate_into(&grads, set);
    }

    pub fn accumulate_into(&self, grads: &Grads, set: &mut ParamSet) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param { tag, id } = node.op {
                if tag == set.tag() {
                    if let Some(g) = &grads.grads[i] {
                        set.get_mut(id).grad.add_assign(g);
                    }
                }
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_t(self.value(*b));
                let db = self.value(*a).t_matmul(g);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::AddRow(a, bias) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *bias, g.col_sums());
            }
            Op::MulRow(a, gain) => {
                let gm = self.value(*gain);
                let am = self.value(*a);
                let mut da = g.clone();
                let mut dgain = Matrix::zeros(1, gm.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        da.set(r, c, g.get(r, c) * gm.get(0, c));
                        dgain.data_mut()[c] += g.get(r, c) * am.get(r, c);
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *gain, dgain);
            }
            Op::MulCol(a, col) => {
                let cm = self.value(*col);
                let am = self.value(*a);
                let mut da = g.clone();
                let mut dcol = Matrix::zeros(cm.rows(), 1);
                for r in 0..g.rows() {
                    let s = cm.get(r, 0);
                    let mut acc = 0.0;
                    for c in 0..g.cols() {
                        da.set(r, c, g.get(r, c) * s);
                        acc += g.get(r, c) * am.get(r, c);
                    }
                    dcol.set(r, 0, acc);
                }
                accumulate(grads, *a, da);
                accumulate(grads, *col, dcol);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                accumulate(grads, *b, g.zip_map(self.value(*a), |gv, av| gv * av));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|v| v * s)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Elu(a) => {
                let x = self.value(*a);
                let d = Matrix::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .zip(y.data())
                        .map(|((gv, xv), yv)| if *xv > 0.0 { *gv } else { gv * (yv + 1.0) })
                        .collect(),
                );
                accumulate(grads, *a, d);
            }
            Op::Tanh(a) => accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Sigmoid(a) => accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv))),
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * yv)),
            Op::Log(a) => accumulate(grads, *a, g.zip_map(self.value(*a), |gv, xv| gv / xv)),
            Op::Square(a) => {
                accumulate(grads, *a, g.zip_map(self.value(*a), |gv, xv| 2.0 * gv * xv))
            }
            Op::LayerNorm { x, inv_std } => {
                let cols = y.cols() as f64;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let mean_g = gr.iter().sum::<f64>() / cols;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols;
                    for ((d, gv), yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    accumulate(grads, *p, g.slice_cols(offset, w));
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xm = self.value(*x);
                let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::SelectRows { x, idx } => {
                let xm = self.value(*x);
                let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                for (o, &src) in idx.iter().enumerate() {
                    for (d, gv) in dx.row_mut(src).iter_mut().zip(g.row(o)) {
                        *d += gv;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SumCols(a) => {
                let am = self.value(*a);
                let mut da = Matrix::zeros(am.rows(), am.cols());
                for r in 0..am.rows() {
                    let gv = g.get(r, 0);
                    da.row_mut(r).iter_mut().for_each(|d| *d = gv);
                }
                accumulate(grads, *a, da);
            }
            Op::SumAll(a) => {
                let am = self.value(*a);
                accumulate(grads, *a, Matrix::filled(am.rows(), am.cols(), g.item()));
            }
            Op::GroupLogSoftmax { x, classes } => {
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dr = dx.row_mut(r);
                    for start in (0..yr.len()).step_by(*classes) {
                        let end = start + classes;
                        let gsum: f64 = gr[start..end].iter().sum();
                        for c in start..end {
                            dr[c] = gr[c] - yr[c].exp() * gsum;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::StraightThrough { probs } => accumulate(grads, *probs, g.clone()),
            Op::FloorAt { x, floor } => {
                let xm = self.value(*x);
                accumulate(
                    grads,
                    *x,
                    g.zip_map(xm, |gv, xv| if xv > *floor { gv } else { 0.0 }),
                );
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
