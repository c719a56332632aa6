//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive appends a node holding its output value. Because nodes
//! are appended only after their inputs exist, the node order is already a
//! topological order and the backward sweep simply walks it in reverse.

use std::collections::HashMap;

use super::array::{gemm, Tensor};
use super::params::{ParamId, ParamStore};
use crate::error::{config, usage, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Sigmoid(usize),
    Sqrt(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SumCols(usize),
    SelectCols(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    LogSumExpRows(usize),
    LogSoftmaxRows(usize),
    PickCols(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
///
/// A tape is owned by a single training step. Create a fresh one per step.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

/// Max-shifted `log(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

#[inline]
fn bidx(i: usize, j: usize, d: (usize, usize)) -> usize {
    let r = if d.0 == 1 { 0 } else { i };
    let c = if d.1 == 1 { 0 } else { j };
    r * d.1 + c
}

/// Sum a gradient of shape `out` down to the (broadcast) shape `target`.
fn reduce_to(g: &[f64], out: (usize, usize), target: (usize, usize)) -> Vec<f64> {
    if out == target {
        return g.to_vec();
    }
    let mut acc = vec![0.0; target.0 * target.1];
    for i in 0..out.0 {
        for j in 0..out.1 {
            acc[bidx(i, j, target)] += g[i * out.1 + j];
        }
    }
    acc
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), grad_enabled: true }
    }

    /// A tape on which nothing requires gradients.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad: requires_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Record a leaf. It is differentiable iff the tensor says so.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = value.requires_grad();
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    /// Bind a stored parameter as a leaf, once per tape. Frozen parameters
    /// are bound as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = !store.is_frozen(id);
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.params.insert(id, v);
        v
    }

    /// Parameters bound on this tape, in binding order.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        let mut v: Vec<_> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        v.sort_by_key(|(_, var)| var.0);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return config(format!(
                "matmul shape mismatch: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.nodes[a.0].value.data(),
            (k as isize, 1),
            self.nodes[b.0].value.data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.transpose();
        let rg = self.rg(a.0);
        self.push(t, Op::Transpose(a.0), rg)
    }

    // ---- broadcasting binary ops ------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (da, db) = (self.dims(a), self.dims(b));
        let Some(d) = broadcast_dims(da, db) else {
            return config(format!(
                "{name} shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        };
        let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut out = Vec::with_capacity(d.0 * d.1);
        for i in 0..d.0 {
            for j in 0..d.1 {
                out.push(f(av[bidx(i, j, da)], bv[bidx(i, j, db)]));
            }
        }
        let shape = if self.shape(a).is_empty() && self.shape(b).is_empty() {
            vec![]
        } else {
            vec![d.0, d.1]
        };
        Ok((Tensor::new(shape, out)?, self.rg(a.0) || self.rg(b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a.0, b.0), rg))
    }

    // ---- elementwise unary ops --------------------------------------------

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.nodes[a.0].value.map(f);
        let rg = self.rg(a.0);
        self.push(t, op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a.0), |x| -x)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a.0, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a.0), |x| x + s)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a.0), f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a.0), softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a.0), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(m), Op::Mean(a.0), rg)
    }

    /// Sum over rows: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.nodes[a.0].value.data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += v[i * c + j];
            }
        }
        let rg = self.rg(a.0);
        self.push(Tensor::matrix(1, c, out).expect("shape"), Op::SumRows(a.0), rg)
    }

    /// Sum over columns: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.nodes[a.0].value.data();
        let out = (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.rg(a.0);
        self.push(Tensor::matrix(r, 1, out).expect("shape"), Op::SumCols(a.0), rg)
    }

    // ---- indexing ----------------------------------------------------------

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        if start > end || end > self.dims(a).1 {
            return config(format!("column slice {start}..{end} out of range for {:?}", self.shape(a)));
        }
        self.select_cols(a, &(start..end).collect::<Vec<_>>())
    }

    /// Columns picked by index (repeats allowed).
    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return config(format!("column {bad} out of range for {:?}", self.shape(a)));
        }
        let v = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            out.extend(idx.iter().map(|&j| v[i * c + j]));
        }
        let rg = self.rg(a.0);
        let t = Tensor::matrix(r, idx.len(), out)?;
        Ok(self.push(t, Op::SelectCols(a.0, idx.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return config("concat of zero tensors");
        };
        let r = self.dims(first).0;
        if let Some(&bad) = parts.iter().find(|&&p| self.dims(p).0 != r) {
            return config(format!(
                "concat row mismatch: {:?} vs {:?}",
                self.shape(first),
                self.shape(bad)
            ));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.nodes[p.0].value.data()[i * c..(i + 1) * c]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        let t = Tensor::matrix(r, total, out)?;
        Ok(self.push(t, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg))
    }

    /// Rows picked by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let r = self.dims(a).0;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return config(format!("row {bad} out of range for {:?}", self.shape(a)));
        }
        let t = self.nodes[a.0].value.select_rows(idx);
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::GatherRows(a.0, idx.to_vec()), rg))
    }

    /// Per-row element `a[i, idx[i]]`, shape `r x 1`.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.len() != r {
            return config(format!("pick_cols needs {r} indices, got {}", idx.len()));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return config(format!("column {bad} out of range for {:?}", self.shape(a)));
        }
        let v = self.nodes[a.0].value.data();
        let out = idx.iter().enumerate().map(|(i, &j)| v[i * c + j]).collect();
        let rg = self.rg(a.0);
        let t = Tensor::matrix(r, 1, out)?;
        Ok(self.push(t, Op::PickCols(a.0, idx.to_vec()), rg))
    }

    // ---- softmax family ----------------------------------------------------

    /// Row-wise log-sum-exp, `r x c -> r x 1`.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.nodes[a.0].value.data();
        let out = (0..r).map(|i| log_sum_exp(&v[i * c..(i + 1) * c])).collect();
        let rg = self.rg(a.0);
        self.push(Tensor::matrix(r, 1, out).expect("shape"), Op::LogSumExpRows(a.0), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|x| x - lse));
        }
        let rg = self.rg(a.0);
        self.push(Tensor::matrix(r, c, out).expect("shape"), Op::LogSoftmaxRows(a.0), rg)
    }

    // ---- backward ----------------------------------------------------------

    /// Propagate adjoints from a scalar `loss` back to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let values = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad).map(|g| {
                    Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape")
                })
            })
            .collect();
        Ok(Gradients { values, params: self.bound_params() })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.dims();
        let val = |i: usize| &self.nodes[i].value;
        let mut acc = |i: usize, contrib: Vec<f64>| {
            if !self.nodes[i].requires_grad {
                return;
            }
            match &mut grads[i] {
                Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let elementwise = |i: usize, f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<f64> {
            // f(grad, input, output)
            val(i)
                .data()
                .iter()
                .zip(node.value.data())
                .zip(g)
                .map(|((&x, &y), &gi)| f(gi, x, y))
                .collect()
        };

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = val(a).dims();
                let n = val(b).dims().1;
                if self.nodes[a].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, (n as isize, 1), val(b).data(), (1, n as isize), 0.0, &mut ga);
                    acc(a, ga);
                }
                if self.nodes[b].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, val(a).data(), (1, k as isize), g, (n as isize, 1), 0.0, &mut gb);
                    acc(b, gb);
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = val(a).dims();
                let gt = Tensor::matrix(c, r, g.to_vec()).expect("shape").transpose();
                acc(a, gt.into_data());
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(a, reduce_to(g, out, val(a).dims()));
                let gb: Vec<f64> = g.iter().map(|x| sign * x).collect();
                acc(b, reduce_to(&gb, out, val(b).dims()));
            }
            &Op::Mul(a, b) | &Op::Div(a, b) => {
                let (da, db) = (val(a).dims(), val(b).dims());
                let (av, bv) = (val(a).data(), val(b).data());
                let is_div = matches!(node.op, Op::Div(..));
                let mut ga = Vec::with_capacity(out.0 * out.1);
                let mut gb = Vec::with_capacity(out.0 * out.1);
                for i in 0..out.0 {
                    for j in 0..out.1 {
                        let gi = g[i * out.1 + j];
                        let x = av[bidx(i, j, da)];
                        let y = bv[bidx(i, j, db)];
                        if is_div {
                            ga.push(gi / y);
                            gb.push(-gi * x / (y * y));
                        } else {
                            ga.push(gi * y);
                            gb.push(gi * x);
                        }
                    }
                }
                acc(a, reduce_to(&ga, out, da));
                acc(b, reduce_to(&gb, out, db));
            }
            &Op::Neg(a) => acc(a, g.iter().map(|x| -x).collect()),
            &Op::Scale(a, s) => acc(a, g.iter().map(|x| s * x).collect()),
            &Op::AddScalar(a) => acc(a, g.to_vec()),
            &Op::Exp(a) => acc(a, elementwise(a, &|gi, _, y| gi * y)),
            &Op::Log(a) => acc(a, elementwise(a, &|gi, x, _| gi / x)),
            &Op::Tanh(a) => acc(a, elementwise(a, &|gi, _, y| gi * (1.0 - y * y))),
            &Op::Relu(a) => acc(a, elementwise(a, &|gi, x, _| if x > 0.0 { gi } else { 0.0 })),
            &Op::Softplus(a) => acc(a, elementwise(a, &|gi, x, _| gi * sigmoid(x))),
            &Op::Sigmoid(a) => acc(a, elementwise(a, &|gi, _, y| gi * y * (1.0 - y))),
            &Op::Sqrt(a) => acc(a, elementwise(a, &|gi, _, y| gi / (2.0 * y))),
            &Op::Square(a) => acc(a, elementwise(a, &|gi, x, _| 2.0 * x * gi)),
            &Op::Sum(a) => acc(a, vec![g[0]; val(a).numel()]),
            &Op::Mean(a) => {
                let n = val(a).numel();
                acc(a, vec![g[0] / n as f64; n]);
            }
            &Op::SumRows(a) => {
                let (r, c) = val(a).dims();
                acc(a, (0..r * c).map(|k| g[k % c]).collect());
            }
            &Op::SumCols(a) => {
                let (r, c) = val(a).dims();
                acc(a, (0..r * c).map(|k| g[k / c]).collect());
            }
            Op::SelectCols(a, idx) => {
                let (r, c) = val(*a).dims();
                let w = idx.len();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for (k, &j) in idx.iter().enumerate() {
                        ga[i * c + j] += g[i * w + k];
                    }
                }
                acc(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let total = out.1;
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = val(p).dims();
                    let mut gp = Vec::with_capacity(r * c);
                    for i in 0..r {
                        gp.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                    }
                    acc(p, gp);
                    offset += c;
                }
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = val(*a).dims();
                let mut ga = vec![0.0; r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[i * c + j] += g[k * c + j];
                    }
                }
                acc(*a, ga);
            }
            Op::PickCols(a, idx) => {
                let (r, c) = val(*a).dims();
                let mut ga = vec![0.0; r * c];
                for (i, &j) in idx.iter().enumerate() {
                    ga[i * c + j] += g[i];
                }
                acc(*a, ga);
            }
            &Op::LogSumExpRows(a) => {
                let (r, c) = val(a).dims();
                let x = val(a).data();
                let y = node.value.data();
                let ga = (0..r * c).map(|k| g[k / c] * (x[k] - y[k / c]).exp()).collect();
                acc(a, ga);
            }
            &Op::LogSoftmaxRows(a) => {
                let (r, c) = val(a).dims();
                let y = node.value.data();
                let mut ga = Vec::with_capacity(r * c);
                for i in 0..r {
                    let gs: f64 = g[i * c..(i + 1) * c].iter().sum();
                    for j in 0..c {
                        ga.push(g[i * c + j] - y[i * c + j].exp() * gs);
                    }
                }
                acc(a, ga);
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    values: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// The adjoint of `v`, if it was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.values.get(v.0).and_then(Option::as_ref)
    }

    /// The adjoint of `v`, zero-filled when unreachable.
    pub fn wrt(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Gradients for every trainable parameter bound on the tape.
    /// Unreached parameters get zeros.
    pub fn params(&self, store: &ParamStore) -> Vec<(ParamId, Tensor)> {
        self.params
            .iter()
            .filter(|(id, _)| !store.is_frozen(*id))
            .map(|&(id, v)| (id, self.wrt(v, store.get(id).shape())))
            .collect()
    }
}
