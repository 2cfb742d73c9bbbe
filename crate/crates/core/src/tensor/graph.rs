//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Parameters enter the tape through [`Graph::param`]; gradients are routed
//! back to the owning [`ParamStore`] with [`ParamStore::accumulate_from`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::array::{matmul_raw, transpose_raw};
use crate::tensor::{ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    LayerNorm(Var, Vec<f64>),
    Softmax(Var),
    LogSoftmax(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    Pick(Var, Vec<(usize, usize)>),
    SqDist(Var, Var),
    MulConst(Var, Vec<f64>),
    Reshape(Var),
    StopGrad,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy)]
struct Binding {
    store: u64,
    index: usize,
    var: Var,
    requires_grad: bool,
}

type Watch = Box<dyn Fn(&str) -> bool + Send + Sync>;

/// Computation tape. Single-use: build, call [`Graph::backward`], drop.
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<Binding>,
    bound: HashMap<(u64, usize), Var>,
    watch: Option<Watch>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: Vec::new(),
            bound: HashMap::new(),
            watch: None,
        }
    }

    /// Track gradients for parameters whose name matches `pred`, even when
    /// the owning store marks them frozen.
    pub fn watching(mut self, pred: impl Fn(&str) -> bool + Send + Sync + 'static) -> Self {
        self.watch = Some(Box::new(pred));
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Leaf that receives a gradient but is not tied to any store.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "variable")
    }

    /// Bind a stored parameter. Binding the same parameter twice returns the
    /// same node, so gradients from every use are summed.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let index = store.index_of(name)?;
        let key = (store.id(), index);
        if let Some(&v) = self.bound.get(&key) {
            return Ok(v);
        }
        let p = store.param_at(index);
        let requires_grad = p.trainable || self.watch.as_ref().is_some_and(|w| w(&p.name));
        let var = self.push(p.value.clone(), Op::Leaf, requires_grad, "param")?;
        self.bound.insert(key, var);
        self.bindings.push(Binding {
            store: store.id(),
            index,
            var,
            requires_grad,
        });
        Ok(var)
    }

    /// Node for a bound parameter, if it was bound.
    pub fn bound_var(&self, store: &ParamStore, name: &str) -> Option<Var> {
        let index = store.index_of(name).ok()?;
        self.bound.get(&(store.id(), index)).copied()
    }

    /// Identity in the forward pass, gradient barrier in the backward pass.
    pub fn stop_grad(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).clone();
        self.push(value, Op::StopGrad, false, "stop_grad")
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg, name)
    }

    fn map(&mut self, a: Var, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push(value, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    fn row_broadcast(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (rows, cols) = ta.dims2();
        if tb.numel() != cols {
            return Err(shape_err(name, ta, tb));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(ta.data()[r * cols + c], tb.data()[c]));
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg, name)
    }

    /// `a (r x c) + b` with `b` holding `c` entries, broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast(a, b, "add_row", Op::AddRow(a, b), |x, y| x + y)
    }

    /// `a (r x c) * b` elementwise with `b` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast(a, b, "mul_row", Op::MulRow(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.map(a, "scale", Op::Scale(a, factor), |x| x * factor)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let value = Tensor::new(vec![c, r], transpose_raw(ta.data(), r, c))?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg, "transpose")
    }

    /// Row-wise normalisation to zero mean and unit variance, no affine.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Input(format!("layer_norm epsilon must be > 0, got {eps}")));
        }
        let ta = self.value(a);
        let (rows, cols) = ta.dims2();
        let mut data = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &ta.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            data.extend(row.iter().map(|x| (x - mean) * is));
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::LayerNorm(a, inv_std), rg, "layer_norm")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.dims2();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &ta.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / z));
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Softmax(a), rg, "softmax")
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.dims2();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &ta.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|x| x - lse));
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSoftmax(a), rg, "log_softmax")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, "relu", Op::Relu(a), |x| x.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(a, "gelu", Op::Gelu(a), gelu)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, "tanh", Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, "sigmoid", Op::Sigmoid(a), sigmoid)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map(a, "square", Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.map(a, "sqrt", Op::Sqrt(a), f64::sqrt)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, "exp", Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, "log", Op::Log(a), f64::ln)
    }

    /// Stack matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat_rows of nothing".into()));
        }
        let cols = self.value(parts[0]).dims2().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2();
            if c != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), t));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    /// Join matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat_cols of nothing".into()));
        }
        let rows = self.value(parts[0]).dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2();
            if r != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), t));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w].copy_from_slice(&t[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.dims2();
        if start > end || end > rows {
            return Err(Error::Shape {
                op: "slice_rows",
                left: ta.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let value = Tensor::new(vec![end - start, cols], ta.data()[start * cols..end * cols].to_vec())?;
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceRows(a, start), rg, "slice_rows")
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.dims2();
        if start > end || end > cols {
            return Err(Error::Shape {
                op: "slice_cols",
                left: ta.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&ta.data()[r * cols + start..r * cols + end]);
        }
        let value = Tensor::new(vec![rows, w], data)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceCols(a, start), rg, "slice_cols")
    }

    /// Select rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.dims2();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Shape {
                    op: "gather_rows",
                    left: ta.shape().to_vec(),
                    right: vec![i],
                });
            }
            data.extend_from_slice(&ta.data()[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![idx.len(), cols], data)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::GatherRows(a, idx.to_vec()), rg, "gather_rows")
    }

    /// Column means, as a `1 x c` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.dims2();
        if rows == 0 {
            return Err(Error::Input("mean over zero rows".into()));
        }
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for (d, x) in data.iter_mut().zip(&ta.data()[r * cols..(r + 1) * cols]) {
                *d += x;
            }
        }
        data.iter_mut().for_each(|d| *d /= rows as f64);
        let value = Tensor::new(vec![1, cols], data)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::MeanRows(a), rg, "mean_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::Input("mean of empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg, "mean")
    }

    /// Gather `(row, col)` entries into a `1 x n` row.
    pub fn pick(&mut self, a: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.dims2();
        let mut data = Vec::with_capacity(entries.len());
        for &(r, c) in entries {
            if r >= rows || c >= cols {
                return Err(Error::Shape {
                    op: "pick",
                    left: ta.shape().to_vec(),
                    right: vec![r, c],
                });
            }
            data.push(ta.data()[r * cols + c]);
        }
        let value = Tensor::row(data);
        let rg = self.rg(&[a]);
        self.push(value, Op::Pick(a, entries.to_vec()), rg, "pick")
    }

    /// Pairwise squared Euclidean distances: `a (n x d)`, `b (m x d)` to `n x m`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, d) = ta.dims2();
        let (m, d2) = tb.dims2();
        if d != d2 {
            return Err(shape_err("sq_dist", ta, tb));
        }
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let ai = &ta.data()[i * d..(i + 1) * d];
            for j in 0..m {
                let bj = &tb.data()[j * d..(j + 1) * d];
                data.push(ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::SqDist(a, b), rg, "sq_dist")
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.numel() {
            return Err(Error::Shape {
                op: "mul_const",
                left: ta.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::MulConst(a, mask), rg, "mul_const")
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Reshape(a), rg, "reshape")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite("backward"));
            }
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * va[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / vb[k];
                    }
                });
                acc(*b, &|s| {
                    for k in 0..s.len() {
                        s[k] -= g[k] * va[k] / (vb[k] * vb[k]);
                    }
                });
            }
            Op::AddRow(a, b) => {
                let cols = val(*b).numel();
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &|s| {
                    for (k, gk) in g.iter().enumerate() {
                        s[k % cols] += gk;
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let cols = vb.len();
                acc(*a, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * vb[k % cols];
                    }
                });
                acc(*b, &|s| {
                    for (k, gk) in g.iter().enumerate() {
                        s[k % cols] += gk * va[k];
                    }
                });
            }
            Op::Scale(a, f) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * f));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.dims2();
                let (_, n) = tb.dims2();
                acc(*a, &|s| {
                    // dA = G * B^T
                    let bt = transpose_raw(tb.data(), k, n);
                    let d = matmul_raw(g, &bt, m, n, k);
                    s.iter_mut().zip(&d).for_each(|(s, d)| *s += d);
                });
                acc(*b, &|s| {
                    // dB = A^T * G
                    let at = transpose_raw(ta.data(), m, k);
                    let d = matmul_raw(&at, g, k, m, n);
                    s.iter_mut().zip(&d).for_each(|(s, d)| *s += d);
                });
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2();
                acc(*a, &|s| {
                    let d = transpose_raw(g, c, r);
                    s.iter_mut().zip(&d).for_each(|(s, d)| *s += d);
                });
            }
            Op::LayerNorm(a, inv_std) => {
                let y = node.value.data();
                let (rows, cols) = node.value.dims2();
                acc(*a, &|s| {
                    for r in 0..rows {
                        let gy = &g[r * cols..(r + 1) * cols];
                        let yr = &y[r * cols..(r + 1) * cols];
                        let mg = gy.iter().sum::<f64>() / cols as f64;
                        let mgy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            s[r * cols + c] += inv_std[r] * (gy[c] - mg - yr[c] * mgy);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let (rows, cols) = node.value.dims2();
                acc(*a, &|s| {
                    for r in 0..rows {
                        let o = r * cols;
                        let dot: f64 = (0..cols).map(|c| g[o + c] * y[o + c]).sum();
                        for c in 0..cols {
                            s[o + c] += y[o + c] * (g[o + c] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let (rows, cols) = node.value.dims2();
                acc(*a, &|s| {
                    for r in 0..rows {
                        let o = r * cols;
                        let gs: f64 = g[o..o + cols].iter().sum();
                        for c in 0..cols {
                            s[o + c] += g[o + c] - y[o + c].exp() * gs;
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                acc(*a, &|s| {
                    for k in 0..s.len() {
                        if x[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                acc(*a, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * gelu_grad(x[k]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::Square(a) => {
                let x = val(*a).data();
                acc(*a, &|s| {
                    for k in 0..s.len() {
                        s[k] += 2.0 * g[k] * x[k];
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                acc(*a, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * 0.5 / y[k];
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * y[k];
                    }
                });
            }
            Op::Log(a) => {
                let x = val(*a).data();
                acc(*a, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / x[k];
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    let slice = &g[offset..offset + n];
                    acc(p, &|s| s.iter_mut().zip(slice).for_each(|(s, g)| *s += g));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).dims2().1;
                    acc(p, &|s| {
                        for r in 0..rows {
                            for c in 0..w {
                                s[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows(a, start) => {
                let cols = val(*a).dims2().1;
                let o = start * cols;
                acc(*a, &|s| {
                    s[o..o + g.len()].iter_mut().zip(g).for_each(|(s, g)| *s += g);
                });
            }
            Op::SliceCols(a, start) => {
                let cols = val(*a).dims2().1;
                let (rows, w) = node.value.dims2();
                acc(*a, &|s| {
                    for r in 0..rows {
                        for c in 0..w {
                            s[r * cols + start + c] += g[r * w + c];
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let cols = val(*a).dims2().1;
                acc(*a, &|s| {
                    for (k, &row) in idx.iter().enumerate() {
                        for c in 0..cols {
                            s[row * cols + c] += g[k * cols + c];
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let (rows, cols) = val(*a).dims2();
                acc(*a, &|s| {
                    for r in 0..rows {
                        for c in 0..cols {
                            s[r * cols + c] += g[c] / rows as f64;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &|s| s.iter_mut().for_each(|s| *s += g[0]));
            }
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                acc(*a, &|s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::Pick(a, entries) => {
                let cols = val(*a).dims2().1;
                acc(*a, &|s| {
                    for (k, &(r, c)) in entries.iter().enumerate() {
                        s[r * cols + c] += g[k];
                    }
                });
            }
            Op::SqDist(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, d) = ta.dims2();
                let m = tb.dims2().0;
                let (da, db) = (ta.data(), tb.data());
                acc(*a, &|s| {
                    for i in 0..n {
                        for j in 0..m {
                            let gij = 2.0 * g[i * m + j];
                            for k in 0..d {
                                s[i * d + k] += gij * (da[i * d + k] - db[j * d + k]);
                            }
                        }
                    }
                });
                acc(*b, &|s| {
                    for i in 0..n {
                        for j in 0..m {
                            let gij = 2.0 * g[i * m + j];
                            for k in 0..d {
                                s[j * d + k] -= gij * (da[i * d + k] - db[j * d + k]);
                            }
                        }
                    }
                });
            }
            Op::MulConst(a, mask) => {
                acc(*a, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * mask[k];
                    }
                });
            }
            Op::Reshape(a) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
        }
    }
}

impl ParamStore {
    /// Add gradients from `grads` into every parameter of this store that was
    /// bound on `graph` with gradient tracking. Tracked parameters the loss
    /// does not reach receive zeros.
    pub fn accumulate_from(&mut self, graph: &Graph, grads: &Grads) {
        let id = self.id();
        for b in graph.bindings.iter().filter(|b| b.store == id && b.requires_grad) {
            match grads.wrt(b.var) {
                Some(g) => self.accumulate_grad(b.index, g),
                None => {
                    let n = graph.value(b.var).numel();
                    self.accumulate_grad(b.index, &vec![0.0; n]);
                }
            }
        }
    }

    /// Gradients for this store's bound parameters, by name, without
    /// touching the stored buffers.
    pub fn collect_grads(&self, graph: &Graph, grads: &Grads) -> Vec<(String, Vec<f64>)> {
        graph
            .bindings
            .iter()
            .filter(|b| b.store == self.id() && b.requires_grad)
            .map(|b| {
                let name = self.param_at(b.index).name.clone();
                let g = grads
                    .wrt(b.var)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; graph.value(b.var).numel()]);
                (name, g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.0, 0.0])).unwrap();
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![3.0; 5])).unwrap();
        let y = g.layer_norm(x, LAYER_NORM_EPS).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1.0, 2.0])).unwrap();
        assert!(g.layer_norm(x, 0.0).is_err());
    }

    #[test]
    fn square_grad() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn independent_param_gets_zero() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::vector(vec![1.0, 2.0])).unwrap();
        store.insert("q", Tensor::scalar(4.0)).unwrap();
        let mut g = Graph::new();
        let _p = g.param(&store, "p").unwrap();
        let q = g.param(&store, "q").unwrap();
        let loss = g.square(q).unwrap();
        let grads = g.backward(loss).unwrap();
        store.accumulate_from(&g, &grads);
        assert_eq!(store.grad("p").unwrap().unwrap().data(), &[0.0, 0.0]);
        assert_eq!(store.grad("q").unwrap().unwrap().data(), &[8.0]);
    }

    #[test]
    fn non_scalar_backward_is_error() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::row(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![3, 4])).unwrap();
        let b = g.constant(Tensor::zeros(vec![3, 2])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[3, 4]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn non_finite_is_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0)).unwrap();
        assert!(matches!(g.log(x), Err(Error::NonFinite("log"))));
    }

    #[test]
    fn stop_grad_blocks() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(2.0)).unwrap();
        let s = g.stop_grad(x).unwrap();
        let y = g.mul(s, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2.0]);
    }
}
