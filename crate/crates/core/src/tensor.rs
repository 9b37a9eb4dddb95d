//! Dense `f64` tensors with a dynamic reverse-mode differentiation tape.
//!
//! A [`Graph`] is built fresh for every sentence. Trainable arrays live in a
//! [`ParamStore`] that the graph borrows, so parameter leaves are never
//! copied. Every operation validates shapes up front and rejects non-finite
//! results, so a [`Var`] handle always refers to finite values.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: argument outside the function domain")]
    Domain { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor has {values} values but shape {shape:?}")]
    BadLength { shape: Vec<usize>, values: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Owned dense array. A scalar has the empty shape.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::BadLength {
                shape,
                values: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named trainable arrays, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn total_size(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            grads: self
                .params
                .iter()
                .map(|p| vec![0.0; p.value.len()])
                .collect(),
        }
    }
}

/// Dense gradient buffers, one per parameter of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.grads.iter().map(|g| g.as_slice())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.grads.iter_mut().flatten().for_each(|g| *g *= k);
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the norm
    /// measured before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm.is_finite() && norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Exp,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMin(Var, f64),
    MatVec { m: Var, v: Var, rows: usize },
    Row(Var, usize),
    Pick(Var, usize),
    Slice(Var, usize, usize),
    Concat(Vec<Var>),
    Sum(Vec<Var>),
    WeightedSum { weights: Var, items: Vec<Var> },
    LogSoftmax(Var),
    LogSumExp(Var),
}

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Value,
    requires_grad: bool,
}

/// Per-sentence computation tape.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
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

/// Stable `log Σ exp(v)`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(data) => data,
            Value::Param(id) => self.params.get(*id).data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            value: Value::Owned(data),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, name: &'static str, op: Op, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &data)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, shape, data, rg))
    }

    /// Constant input; gradients are not tracked.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        check_finite("constant", &t.data)?;
        Ok(self.push(Op::Leaf, t.shape, t.data, false))
    }

    /// Differentiable input that is not a stored parameter.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        check_finite("leaf", &t.data)?;
        Ok(self.push(Op::Leaf, t.shape, t.data, true))
    }

    pub fn scalar(&mut self, x: f64) -> Result<Var> {
        self.constant(Tensor::scalar(x))
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.push(Op::Leaf, vec![n], vec![0.0; n], false)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node
    /// so gradients accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let shape = self.params.get(id).shape().to_vec();
        self.nodes.push(Node {
            op: Op::Param,
            shape,
            value: Value::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn is_scalar(&self, v: Var) -> bool {
        self.nodes[v.0].shape.is_empty()
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = if sa == sb || sb.is_empty() {
            sa.clone()
        } else if sa.is_empty() {
            sb.clone()
        } else {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: sa,
                rhs: sb,
            });
        };
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let (va, vb) = (self.value(a), self.value(b));
        let data: Vec<f64> = if va.len() == vb.len() {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else if vb.len() == 1 {
            va.iter().map(|&x| f(x, vb[0])).collect()
        } else {
            vb.iter().map(|&y| f(va[0], y)).collect()
        };
        self.derived(name, Op::Binary(kind, a, b), shape, data, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (name, data): (&'static str, Vec<f64>) = match kind {
            Unary::Sigmoid => ("sigmoid", x.iter().map(|&v| sigmoid(v)).collect()),
            Unary::Tanh => ("tanh", x.iter().map(|v| v.tanh()).collect()),
            Unary::Exp => ("exp", x.iter().map(|v| v.exp()).collect()),
            Unary::Log => {
                if x.iter().any(|&v| v <= 0.0) {
                    return Err(TensorError::Domain { op: "log" });
                }
                ("log", x.iter().map(|v| v.ln()).collect())
            }
        };
        let shape = self.shape(a).to_vec();
        self.derived(name, Op::Unary(kind, a), shape, data, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let data = self.value(a).iter().map(|v| v * k).collect();
        let shape = self.shape(a).to_vec();
        self.derived("scale", Op::Scale(a, k), shape, data, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let data = self.value(a).iter().map(|v| v + k).collect();
        let shape = self.shape(a).to_vec();
        self.derived("add_scalar", Op::AddScalar(a), shape, data, &[a])
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    /// Elementwise `max(a, lo)`; the gradient is zero where clamped.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        let data = self.value(a).iter().map(|&v| v.max(lo)).collect();
        let shape = self.shape(a).to_vec();
        self.derived("clamp_min", Op::ClampMin(a, lo), shape, data, &[a])
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let rows = match self.shape(m) {
            [r, _] => *r,
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "matvec",
                    lhs: s.to_vec(),
                    rhs: self.shape(v).to_vec(),
                })
            }
        };
        self.matvec_rows(m, v, rows)
    }

    /// Product of the first `rows` rows of `m` with `v`.
    pub fn matvec_rows(&mut self, m: Var, v: Var, rows: usize) -> Result<Var> {
        let (r, c) = match self.shape(m) {
            [r, c] => (*r, *c),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "matvec",
                    lhs: s.to_vec(),
                    rhs: self.shape(v).to_vec(),
                })
            }
        };
        if self.shape(v) != [c] || rows > r || rows == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                lhs: vec![rows, c],
                rhs: self.shape(v).to_vec(),
            });
        }
        let mv = self.value(m);
        let vv = self.value(v);
        let data: Vec<f64> = mv[..rows * c]
            .chunks_exact(c)
            .map(|row| row.iter().zip(vv).map(|(a, b)| a * b).sum())
            .collect();
        self.derived("matvec", Op::MatVec { m, v, rows }, vec![rows], data, &[m, v])
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        let (r, c) = match self.shape(m) {
            [r, c] => (*r, *c),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "row",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        if i >= r {
            return Err(TensorError::Index {
                op: "row",
                index: i,
                len: r,
            });
        }
        let data = self.value(m)[i * c..(i + 1) * c].to_vec();
        self.derived("row", Op::Row(m, i), vec![c], data, &[m])
    }

    /// Element `i` of a vector, as a scalar.
    pub fn pick(&mut self, a: Var, i: usize) -> Result<Var> {
        let n = self.value(a).len();
        if i >= n {
            return Err(TensorError::Index {
                op: "pick",
                index: i,
                len: n,
            });
        }
        let data = vec![self.value(a)[i]];
        self.derived("pick", Op::Pick(a, i), vec![], data, &[a])
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.value(a).len();
        if len == 0 || start + len > n || self.shape(a).len() > 1 {
            return Err(TensorError::Index {
                op: "slice",
                index: start + len,
                len: n,
            });
        }
        let data = self.value(a)[start..start + len].to_vec();
        self.derived("slice", Op::Slice(a, start, len), vec![len], data, &[a])
    }

    /// Concatenates scalars and vectors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "concat" });
        }
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p).len() > 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(p).to_vec(),
                    rhs: vec![],
                });
            }
            data.extend_from_slice(self.value(p));
        }
        let n = data.len();
        self.derived("concat", Op::Concat(parts.to_vec()), vec![n], data, parts)
    }

    pub fn sum(&mut self, items: &[Var]) -> Result<Var> {
        let first = *items.first().ok_or(TensorError::Empty { op: "sum" })?;
        let shape = self.shape(first).to_vec();
        let mut data = vec![0.0; self.value(first).len()];
        for &it in items {
            if self.shape(it) != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "sum",
                    lhs: shape,
                    rhs: self.shape(it).to_vec(),
                });
            }
            for (d, x) in data.iter_mut().zip(self.value(it)) {
                *d += x;
            }
        }
        self.derived("sum", Op::Sum(items.to_vec()), shape, data, items)
    }

    /// `Σ_k weights[k] * items[k]`
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let first = *items.first().ok_or(TensorError::Empty { op: "weighted_sum" })?;
        if self.value(weights).len() != items.len() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                lhs: self.shape(weights).to_vec(),
                rhs: vec![items.len()],
            });
        }
        let shape = self.shape(first).to_vec();
        let mut data = vec![0.0; self.value(first).len()];
        for (k, &it) in items.iter().enumerate() {
            if self.shape(it) != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "weighted_sum",
                    lhs: shape,
                    rhs: self.shape(it).to_vec(),
                });
            }
            let w = self.value(weights)[k];
            for (d, x) in data.iter_mut().zip(self.value(it)) {
                *d += w * x;
            }
        }
        let mut inputs = items.to_vec();
        inputs.push(weights);
        self.derived(
            "weighted_sum",
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
            shape,
            data,
            &inputs,
        )
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(TensorError::Empty { op: "log_softmax" });
        }
        let lse = logsumexp(x);
        let data = x.iter().map(|v| v - lse).collect();
        let shape = self.shape(a).to_vec();
        self.derived("log_softmax", Op::LogSoftmax(a), shape, data, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ls = self.log_softmax(a)?;
        self.exp(ls)
    }

    /// Stable `log Σ exp(a)` reduced to a scalar.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(TensorError::Empty { op: "logsumexp" });
        }
        let data = vec![logsumexp(x)];
        self.derived("logsumexp", Op::LogSumExp(a), vec![], data, &[a])
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<GradTable> {
        if !self.is_scalar(loss) {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let out = self.value(Var(idx));
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::Binary(kind, a, b) => {
                    let (a, b) = (*a, *b);
                    for (slot, side, other) in [(0, a, b), (1, b, a)] {
                        if !self.nodes[side.0].requires_grad {
                            continue;
                        }
                        let vo = self.value(other);
                        let n = self.value(side).len();
                        let local = |k: usize| -> f64 {
                            match kind {
                                Binary::Add => 1.0,
                                Binary::Sub if slot == 0 => 1.0,
                                Binary::Sub => -1.0,
                                Binary::Mul => vo[if vo.len() == 1 { 0 } else { k }],
                            }
                        };
                        let buf = acc(&mut grads, side, n);
                        if n == g.len() {
                            for k in 0..n {
                                buf[k] += g[k] * local(k);
                            }
                        } else {
                            // scalar operand broadcast over the other
                            buf[0] += g.iter().enumerate().map(|(k, gk)| gk * local(k)).sum::<f64>();
                        }
                    }
                }
                Op::Unary(kind, a) => {
                    let x = self.value(*a);
                    let buf = acc(&mut grads, *a, x.len());
                    for k in 0..x.len() {
                        let d = match kind {
                            Unary::Sigmoid => out[k] * (1.0 - out[k]),
                            Unary::Tanh => 1.0 - out[k] * out[k],
                            Unary::Exp => out[k],
                            Unary::Log => 1.0 / x[k],
                        };
                        buf[k] += g[k] * d;
                    }
                }
                Op::Scale(a, s) => {
                    let buf = acc(&mut grads, *a, g.len());
                    for (b, gk) in buf.iter_mut().zip(&g) {
                        *b += gk * s;
                    }
                }
                Op::AddScalar(a) => {
                    let buf = acc(&mut grads, *a, g.len());
                    for (b, gk) in buf.iter_mut().zip(&g) {
                        *b += gk;
                    }
                }
                Op::ClampMin(a, lo) => {
                    let x = self.value(*a);
                    let buf = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        if x[k] > *lo {
                            buf[k] += g[k];
                        }
                    }
                }
                Op::MatVec { m, v, rows } => {
                    let (m, v, rows) = (*m, *v, *rows);
                    let c = self.shape(m)[1];
                    let r = self.shape(m)[0];
                    let (mv, vv) = (self.value(m), self.value(v));
                    if self.nodes[v.0].requires_grad {
                        let buf = acc(&mut grads, v, c);
                        for (row, gr) in mv[..rows * c].chunks_exact(c).zip(&g) {
                            for (b, w) in buf.iter_mut().zip(row) {
                                *b += gr * w;
                            }
                        }
                    }
                    if self.nodes[m.0].requires_grad {
                        let buf = acc(&mut grads, m, r * c);
                        for (brow, gr) in buf[..rows * c].chunks_exact_mut(c).zip(&g) {
                            if *gr == 0.0 {
                                continue;
                            }
                            for (b, x) in brow.iter_mut().zip(vv) {
                                *b += gr * x;
                            }
                        }
                    }
                }
                Op::Row(m, i) => {
                    let (r, c) = (self.shape(*m)[0], self.shape(*m)[1]);
                    let buf = acc(&mut grads, *m, r * c);
                    for (b, gk) in buf[i * c..(i + 1) * c].iter_mut().zip(&g) {
                        *b += gk;
                    }
                }
                Op::Pick(a, i) => {
                    let n = self.value(*a).len();
                    acc(&mut grads, *a, n)[*i] += g[0];
                }
                Op::Slice(a, start, len) => {
                    let n = self.value(*a).len();
                    let buf = acc(&mut grads, *a, n);
                    for (b, gk) in buf[*start..start + len].iter_mut().zip(&g) {
                        *b += gk;
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if self.nodes[p.0].requires_grad {
                            let buf = acc(&mut grads, p, n);
                            for (b, gk) in buf.iter_mut().zip(&g[off..off + n]) {
                                *b += gk;
                            }
                        }
                        off += n;
                    }
                }
                Op::Sum(items) => {
                    for &it in items {
                        if self.nodes[it.0].requires_grad {
                            let buf = acc(&mut grads, it, g.len());
                            for (b, gk) in buf.iter_mut().zip(&g) {
                                *b += gk;
                            }
                        }
                    }
                }
                Op::WeightedSum { weights, items } => {
                    let w = self.value(*weights).to_vec();
                    let mut gw = vec![0.0; items.len()];
                    for (k, &it) in items.iter().enumerate() {
                        let x = self.value(it);
                        gw[k] = x.iter().zip(&g).map(|(a, b)| a * b).sum();
                        if self.nodes[it.0].requires_grad {
                            let buf = acc(&mut grads, it, g.len());
                            for (b, gk) in buf.iter_mut().zip(&g) {
                                *b += w[k] * gk;
                            }
                        }
                    }
                    if self.nodes[weights.0].requires_grad {
                        let buf = acc(&mut grads, *weights, items.len());
                        for (b, x) in buf.iter_mut().zip(gw) {
                            *b += x;
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let total: f64 = g.iter().sum();
                    let buf = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        buf[k] += g[k] - out[k].exp() * total;
                    }
                }
                Op::LogSumExp(a) => {
                    let x = self.value(*a);
                    let buf = acc(&mut grads, *a, x.len());
                    for k in 0..x.len() {
                        buf[k] += g[0] * (x[k] - out[0]).exp();
                    }
                }
            }
            grads[idx] = Some(g);
        }

        Ok(GradTable {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct GradTable {
    grads: Vec<Option<Vec<f64>>>,
    param_vars: Vec<Option<Var>>,
}

impl GradTable {
    /// Gradient with respect to a recorded node; zeros if it was unreachable.
    pub fn wrt(&self, g: &Graph<'_>, v: Var) -> Vec<f64> {
        self.grads
            .get(v.0)
            .and_then(|x| x.clone())
            .unwrap_or_else(|| vec![0.0; g.value(v).len()])
    }

    /// Adds `scale * d loss / d param` into `out` for every parameter used.
    pub fn accumulate_into(&self, out: &mut Gradients, scale: f64) {
        for (pid, var) in self.param_vars.iter().enumerate() {
            let Some(var) = var else { continue };
            let Some(Some(g)) = self.grads.get(var.0) else { continue };
            for (d, s) in out.get_mut(ParamId(pid)).iter_mut().zip(g) {
                *d += scale * s;
            }
        }
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR)
}

/// Magnitude below which gradient-check errors are measured absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-2;

/// Compares the analytic gradient of `f` at `point` with central finite
/// differences and returns the worst relative error.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a>, Var) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let empty = ParamStore::new();
    let mut g = Graph::new(&empty);
    let x = g.leaf(point.clone())?;
    let loss = f(&mut g, x)?;
    let analytic = g.backward(loss)?.wrt(&g, x);

    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new(&empty);
        let x = g.leaf(p.clone())?;
        let y = f(&mut g, x)?;
        Ok(g.scalar_value(y))
    };
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for k in 0..point.len() {
        let orig = probe.data[k];
        probe.data[k] = orig + step;
        let up = eval(&probe)?;
        probe.data[k] = orig - step;
        let down = eval(&probe)?;
        probe.data[k] = orig;
        let numeric = (up - down) / (2.0 * step);
        if !numeric.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        worst = worst.max(rel_error(analytic[k], numeric));
    }
    Ok(worst)
}

/// Finite-difference check over every entry of every parameter in `store`.
pub fn grad_check_params<F>(store: &ParamStore, f: F, step: f64) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut analytic = store.zeros_like();
    {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?.accumulate_into(&mut analytic, 1.0);
    }
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data[k];
            probe.get_mut(id).data[k] = orig + step;
            let up = {
                let mut g = Graph::new(&probe);
                let y = f(&mut g)?;
                g.scalar_value(y)
            };
            probe.get_mut(id).data[k] = orig - step;
            let down = {
                let mut g = Graph::new(&probe);
                let y = f(&mut g)?;
                g.scalar_value(y)
            };
            probe.get_mut(id).data[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(TensorError::NonFinite { op: "grad_check" });
            }
            worst = worst.max(rel_error(analytic.get(id)[k], numeric));
        }
    }
    Ok(worst)
}
