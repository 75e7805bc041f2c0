//! Reverse-mode automatic differentiation over scalars and dense vectors.
//!
//! A [`Tape`] records operations eagerly: every call computes the forward
//! value immediately and appends a node. Values of all nodes live in one
//! contiguous arena, so recording a node never allocates beyond amortized
//! growth of that arena. Parameters enter the tape as leaves tagged with the
//! [`BlockId`] of a [`ParamSet`] block; [`Adjoints::accumulate_into`] scatters
//! their gradients into a [`Gradients`] value with the same layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    /// `ln σ(x)`, computed without forming σ(x).
    LogSigmoid,
    Dot,
    Sum,
    Softmax,
    LogSoftmax,
    LogSumExp,
    Clamp { lo: f64, hi: f64 },
    Square,
    /// Elementwise minimum; ties split the incoming gradient evenly.
    Minimum,
    /// Elementwise `ln(e^a + e^b)`.
    LogAddExp,
    /// Row-major `rows × cols` matrix times a `cols` vector.
    MatVec { rows: usize },
    Index(usize),
    Concat,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::LogSigmoid => "log_sigmoid",
            OpKind::Dot => "dot",
            OpKind::Sum => "sum",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LogSumExp => "logsumexp",
            OpKind::Clamp { .. } => "clamp",
            OpKind::Square => "square",
            OpKind::Minimum => "minimum",
            OpKind::LogAddExp => "logaddexp",
            OpKind::MatVec { .. } => "matvec",
            OpKind::Index(_) => "index",
            OpKind::Concat => "concat",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::Dot
            | OpKind::Minimum
            | OpKind::LogAddExp
            | OpKind::MatVec { .. } => Some(2),
            OpKind::Concat => None,
            _ => Some(1),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum NodeKind {
    Constant,
    Param(BlockId),
    Op(OpKind),
}

#[derive(Clone, Copy, Debug)]
struct Node {
    kind: NodeKind,
    inputs_start: usize,
    inputs_len: usize,
    start: usize,
    len: usize,
}

/// `ln(e^a + e^b)` without overflow.
pub fn logaddexp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (-(a - b).abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow or catastrophic underflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Max-shifted log-sum-exp. Returns `-inf` for an empty or all `-inf` slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|&x| x - lse).collect()
}

/// Append-only record of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    inputs: Vec<usize>,
    values: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize, values: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(nodes),
            inputs: Vec::with_capacity(nodes * 2),
            values: Vec::with_capacity(values),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.inputs.clear();
        self.values.clear();
    }

    fn push_leaf(&mut self, kind: NodeKind, data: &[f64]) -> Var {
        let start = self.values.len();
        self.values.extend_from_slice(data);
        self.nodes.push(Node {
            kind,
            inputs_start: self.inputs.len(),
            inputs_len: 0,
            start,
            len: data.len(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, data: &[f64]) -> Var {
        self.push_leaf(NodeKind::Constant, data)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push_leaf(NodeKind::Constant, &[x])
    }

    /// Records block `id` of `params` as a differentiable leaf.
    pub fn param(&mut self, params: &ParamSet, id: BlockId) -> Var {
        self.push_leaf(NodeKind::Param(id), params.block(id))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        &self.values[n.start..n.start + n.len]
    }

    /// Value of a scalar node (first element for vectors).
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.0 < self.nodes.len() {
            Ok(self.nodes[v.0].len)
        } else {
            Err(Error::contract(format!(
                "node {} does not belong to this tape ({} nodes)",
                v.0,
                self.nodes.len()
            )))
        }
    }

    /// Records `kind` applied to `inputs`, computing its forward value.
    pub fn record(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let node_id = self.nodes.len();
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(Error::contract(format!(
                    "{} expects {n} inputs, got {}",
                    kind.name(),
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::contract("concat of zero inputs"));
        }
        let mut lens = [0usize; 2];
        for (i, &v) in inputs.iter().enumerate() {
            let l = self.check(v)?;
            if i < 2 {
                lens[i] = l;
            }
        }
        let shape_err = |reason: String| Error::Eval {
            node: node_id,
            op: kind.name(),
            reason,
        };
        let out_len = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::Minimum | OpKind::LogAddExp => {
                let (a, b) = (lens[0], lens[1]);
                if a == b || b == 1 {
                    a
                } else if a == 1 {
                    b
                } else {
                    return Err(shape_err(format!("incompatible lengths {a} and {b}")));
                }
            }
            OpKind::Dot => {
                if lens[0] != lens[1] {
                    return Err(shape_err(format!(
                        "dot of lengths {} and {}",
                        lens[0], lens[1]
                    )));
                }
                1
            }
            OpKind::Sum | OpKind::LogSumExp | OpKind::Index(_) => {
                if lens[0] == 0 {
                    return Err(shape_err("empty input".into()));
                }
                if let OpKind::Index(i) = kind {
                    if i >= lens[0] {
                        return Err(shape_err(format!("index {i} out of {}", lens[0])));
                    }
                }
                1
            }
            OpKind::MatVec { rows } => {
                let cols = lens[1];
                if rows * cols != lens[0] {
                    return Err(shape_err(format!(
                        "matrix of {} entries is not {rows}x{cols}",
                        lens[0]
                    )));
                }
                rows
            }
            OpKind::Concat => inputs.iter().map(|v| self.nodes[v.0].len).sum(),
            OpKind::Softmax | OpKind::LogSoftmax if lens[0] == 0 => {
                return Err(shape_err("empty input".into()));
            }
            _ => lens[0],
        };

        let start = self.values.len();
        self.values.resize(start + out_len, 0.0);
        let (before, out) = self.values.split_at_mut(start);
        let slice = |v: Var| {
            let n = &self.nodes[v.0];
            &before[n.start..n.start + n.len]
        };
        let fail = |reason: String| Error::Eval {
            node: node_id,
            op: kind.name(),
            reason,
        };

        let result: Result<()> = (|| {
            match kind {
                OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::Minimum | OpKind::LogAddExp => {
                    let a = slice(inputs[0]);
                    let b = slice(inputs[1]);
                    for (i, o) in out.iter_mut().enumerate() {
                        let x = a[if a.len() == 1 { 0 } else { i }];
                        let y = b[if b.len() == 1 { 0 } else { i }];
                        *o = match kind {
                            OpKind::Add => x + y,
                            OpKind::Sub => x - y,
                            OpKind::Mul => x * y,
                            OpKind::Div => {
                                if y == 0.0 {
                                    return Err(fail(format!("division by zero at element {i}")));
                                }
                                x / y
                            }
                            OpKind::LogAddExp => logaddexp(x, y),
                            _ => x.min(y),
                        };
                    }
                }
                OpKind::Neg => unary(out, slice(inputs[0]), |x| -x),
                OpKind::Exp => unary(out, slice(inputs[0]), f64::exp),
                OpKind::Tanh => unary(out, slice(inputs[0]), f64::tanh),
                OpKind::Sigmoid => unary(out, slice(inputs[0]), sigmoid),
                OpKind::LogSigmoid => unary(out, slice(inputs[0]), log_sigmoid),
                OpKind::Square => unary(out, slice(inputs[0]), |x| x * x),
                OpKind::Clamp { lo, hi } => unary(out, slice(inputs[0]), |x| x.clamp(lo, hi)),
                OpKind::Log => {
                    for (i, (o, &x)) in out.iter_mut().zip(slice(inputs[0])).enumerate() {
                        if x <= 0.0 || x.is_nan() {
                            return Err(fail(format!("log of non-positive value {x} at element {i}")));
                        }
                        *o = x.ln();
                    }
                }
                OpKind::Dot => {
                    out[0] = slice(inputs[0])
                        .iter()
                        .zip(slice(inputs[1]))
                        .map(|(x, y)| x * y)
                        .sum();
                }
                OpKind::Sum => out[0] = slice(inputs[0]).iter().sum(),
                OpKind::Softmax => out.copy_from_slice(&softmax(slice(inputs[0]))),
                OpKind::LogSoftmax => out.copy_from_slice(&log_softmax(slice(inputs[0]))),
                OpKind::LogSumExp => out[0] = logsumexp(slice(inputs[0])),
                OpKind::MatVec { rows } => {
                    let w = slice(inputs[0]);
                    let x = slice(inputs[1]);
                    let cols = x.len();
                    for r in 0..rows {
                        out[r] = w[r * cols..(r + 1) * cols]
                            .iter()
                            .zip(x)
                            .map(|(a, b)| a * b)
                            .sum();
                    }
                }
                OpKind::Index(i) => out[0] = slice(inputs[0])[i],
                OpKind::Concat => {
                    let mut off = 0;
                    for &v in inputs {
                        let s = slice(v);
                        out[off..off + s.len()].copy_from_slice(s);
                        off += s.len();
                    }
                }
            }
            Ok(())
        })();
        if let Err(e) = result {
            self.values.truncate(start);
            return Err(e);
        }

        let inputs_start = self.inputs.len();
        self.inputs.extend(inputs.iter().map(|v| v.0));
        self.nodes.push(Node {
            kind: NodeKind::Op(kind),
            inputs_start,
            inputs_len: inputs.len(),
            start,
            len: out_len,
        });
        Ok(Var(node_id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Div, &[a, b])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Neg, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Log, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Sigmoid, &[a])
    }
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::LogSigmoid, &[a])
    }
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Dot, &[a, b])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Sum, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Softmax, &[a])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::LogSoftmax, &[a])
    }
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::LogSumExp, &[a])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.record(OpKind::Clamp { lo, hi }, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Square, &[a])
    }
    pub fn logaddexp(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::LogAddExp, &[a, b])
    }
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Minimum, &[a, b])
    }
    pub fn matvec(&mut self, w: Var, x: Var, rows: usize) -> Result<Var> {
        self.record(OpKind::MatVec { rows }, &[w, x])
    }
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        self.record(OpKind::Index(i), &[a])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(OpKind::Concat, parts)
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Adjoints<'_>> {
        let len = self.check(output)?;
        if len != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, node {} has length {len}",
                output.0
            )));
        }
        let mut adj = vec![0.0; self.values.len()];
        let mut live = vec![false; self.nodes.len()];
        adj[self.nodes[output.0].start] = 1.0;
        live[output.0] = true;

        for id in (0..=output.0).rev() {
            if !live[id] {
                continue;
            }
            let node = self.nodes[id];
            let NodeKind::Op(kind) = node.kind else {
                continue;
            };
            let ins = &self.inputs[node.inputs_start..node.inputs_start + node.inputs_len];
            for &i in ins {
                live[i] = true;
            }
            let (adj_before, adj_rest) = adj.split_at_mut(node.start);
            let g = &adj_rest[..node.len];
            let y = &self.values[node.start..node.start + node.len];
            let val = |i: usize| {
                let n = &self.nodes[i];
                &self.values[n.start..n.start + n.len]
            };
            let span = |i: usize| (self.nodes[i].start, self.nodes[i].len);

            match kind {
                OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::Minimum | OpKind::LogAddExp => {
                    let (sa, la) = span(ins[0]);
                    let (sb, lb) = span(ins[1]);
                    let a = val(ins[0]);
                    let b = val(ins[1]);
                    for (k, &gk) in g.iter().enumerate() {
                        let ia = if la == 1 { 0 } else { k };
                        let ib = if lb == 1 { 0 } else { k };
                        let (x, z) = (a[ia], b[ib]);
                        let (da, db) = match kind {
                            OpKind::Add => (gk, gk),
                            OpKind::Sub => (gk, -gk),
                            OpKind::Mul => (gk * z, gk * x),
                            OpKind::Div => (gk / z, -gk * x / (z * z)),
                            OpKind::LogAddExp => {
                                let out = y[k];
                                if out == f64::NEG_INFINITY {
                                    (0.0, 0.0)
                                } else {
                                    (gk * (x - out).exp(), gk * (z - out).exp())
                                }
                            }
                            _ => {
                                if x < z {
                                    (gk, 0.0)
                                } else if x > z {
                                    (0.0, gk)
                                } else {
                                    (0.5 * gk, 0.5 * gk)
                                }
                            }
                        };
                        adj_before[sa + ia] += da;
                        adj_before[sb + ib] += db;
                    }
                }
                OpKind::Neg
                | OpKind::Exp
                | OpKind::Log
                | OpKind::Tanh
                | OpKind::Sigmoid
                | OpKind::LogSigmoid
                | OpKind::Square
                | OpKind::Clamp { .. } => {
                    let (sa, _) = span(ins[0]);
                    let a = val(ins[0]);
                    for k in 0..node.len {
                        let x = a[k];
                        let d = match kind {
                            OpKind::Neg => -1.0,
                            OpKind::Exp => y[k],
                            OpKind::Log => 1.0 / x,
                            OpKind::Tanh => 1.0 - y[k] * y[k],
                            OpKind::Sigmoid => y[k] * (1.0 - y[k]),
                            OpKind::LogSigmoid => sigmoid(-x),
                            OpKind::Square => 2.0 * x,
                            OpKind::Clamp { lo, hi } => {
                                if (lo..=hi).contains(&x) {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            _ => unreachable!(),
                        };
                        adj_before[sa + k] += g[k] * d;
                    }
                }
                OpKind::Dot => {
                    let (sa, la) = span(ins[0]);
                    let (sb, _) = span(ins[1]);
                    let a = val(ins[0]);
                    let b = val(ins[1]);
                    for k in 0..la {
                        adj_before[sa + k] += g[0] * b[k];
                        adj_before[sb + k] += g[0] * a[k];
                    }
                }
                OpKind::Sum => {
                    let (sa, la) = span(ins[0]);
                    adj_before[sa..sa + la].iter_mut().for_each(|x| *x += g[0]);
                }
                OpKind::Softmax => {
                    let (sa, la) = span(ins[0]);
                    let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    for k in 0..la {
                        adj_before[sa + k] += y[k] * (g[k] - gy);
                    }
                }
                OpKind::LogSoftmax => {
                    let (sa, la) = span(ins[0]);
                    let gs: f64 = g.iter().sum();
                    for k in 0..la {
                        adj_before[sa + k] += g[k] - y[k].exp() * gs;
                    }
                }
                OpKind::LogSumExp => {
                    let (sa, la) = span(ins[0]);
                    let a = val(ins[0]);
                    if y[0].is_finite() {
                        for k in 0..la {
                            adj_before[sa + k] += g[0] * (a[k] - y[0]).exp();
                        }
                    }
                }
                OpKind::MatVec { rows } => {
                    let (sw, _) = span(ins[0]);
                    let (sx, cols) = span(ins[1]);
                    let w = val(ins[0]);
                    let x = val(ins[1]);
                    for r in 0..rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        let row = &w[r * cols..(r + 1) * cols];
                        let dw = &mut adj_before[sw + r * cols..sw + (r + 1) * cols];
                        for c in 0..cols {
                            dw[c] += gr * x[c];
                        }
                        for c in 0..cols {
                            adj_before[sx + c] += gr * row[c];
                        }
                    }
                }
                OpKind::Index(i) => {
                    let (sa, _) = span(ins[0]);
                    adj_before[sa + i] += g[0];
                }
                OpKind::Concat => {
                    let mut off = 0;
                    for &i in ins {
                        let (s, l) = span(i);
                        for k in 0..l {
                            adj_before[s + k] += g[off + k];
                        }
                        off += l;
                    }
                }
            }
        }
        Ok(Adjoints { tape: self, adj })
    }
}

fn unary(out: &mut [f64], a: &[f64], f: impl Fn(f64) -> f64) {
    for (o, &x) in out.iter_mut().zip(a) {
        *o = f(x);
    }
}

/// Result of a backward sweep.
pub struct Adjoints<'t> {
    tape: &'t Tape,
    adj: Vec<f64>,
}

impl Adjoints<'_> {
    /// Gradient of the output with respect to node `v`.
    pub fn wrt(&self, v: Var) -> &[f64] {
        let n = &self.tape.nodes[v.0];
        &self.adj[n.start..n.start + n.len]
    }

    /// Adds every parameter leaf's gradient into `grads`.
    pub fn accumulate_into(&self, grads: &mut Gradients) {
        for n in &self.tape.nodes {
            if let NodeKind::Param(id) = n.kind {
                let dst = &mut grads.blocks[id.0];
                for (d, s) in dst.iter_mut().zip(&self.adj[n.start..n.start + n.len]) {
                    *d += s;
                }
            }
        }
    }
}

/// Index of a block inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named flat parameter arrays with a fixed global ordering.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    blocks: Vec<ParamBlock>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> BlockId {
        let name = name.into();
        let size: usize = shape.iter().product();
        assert_eq!(size, data.len(), "block {name}: shape/data mismatch");
        self.blocks.push(ParamBlock { name, shape, data });
        BlockId(self.blocks.len() - 1)
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, id: BlockId) -> &[f64] {
        &self.blocks[id.0].data
    }

    /// Mutable views of every block's data, in global order.
    pub fn data_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.blocks.iter_mut().map(|b| b.data.as_mut_slice())
    }

    pub fn block_mut(&mut self, id: BlockId) -> &mut [f64] {
        &mut self.blocks[id.0].data
    }

    pub fn id_of(&self, name: &str) -> Option<BlockId> {
        self.blocks.iter().position(|b| b.name == name).map(BlockId)
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.data.iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for b in &mut self.blocks {
            let n = b.data.len();
            b.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            blocks: self.blocks.iter().map(|b| vec![0.0; b.data.len()]).collect(),
        }
    }

    /// Checks that `other` has identical block names and shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

/// Gradient buffers laid out like the [`ParamSet`] they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn block(&self, id: BlockId) -> &[f64] {
        &self.blocks[id.0]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flatten().copied().collect()
    }

    pub fn norm(&self) -> f64 {
        self.blocks
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.blocks.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().all(|g| g.is_finite())
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut t = Tape::new();
        let x = t.scalar(0.0);
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.scalar_value(y), 0.5);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(&[0.0, 0.0, 0.0]);
        let y = t.softmax(x).unwrap();
        for &p in t.value(y) {
            assert_relative_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn log_softmax_large_logits_stay_finite() {
        let mut t = Tape::new();
        let x = t.constant(&[1000.0, 0.0]);
        let y = t.log_softmax(x).unwrap();
        let v = t.value(y);
        // max-shifted closed form: [-ln(1+e^-1000), -1000 - ln(1+e^-1000)]
        let tail = (-1000.0f64).exp().ln_1p();
        assert!(v.iter().all(|x| x.is_finite()));
        assert_eq!(v[0], -tail);
        assert_eq!(v[1], -1000.0 - tail);
    }

    #[test]
    fn square_derivative() {
        let mut ps = ParamSet::new();
        let id = ps.push("x", vec![1], vec![3.0]);
        let mut t = Tape::new();
        let x = t.param(&ps, id);
        let y = t.mul(x, x).unwrap();
        let mut g = ps.zeros_like();
        t.backward(y).unwrap().accumulate_into(&mut g);
        assert_eq!(g.block(id), &[6.0]);
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let mut ps = ParamSet::new();
        let a = ps.push("a", vec![1], vec![2.0]);
        let b = ps.push("b", vec![2], vec![1.0, -1.0]);
        let mut t = Tape::new();
        let x = t.param(&ps, a);
        let _unused = t.param(&ps, b);
        let y = t.exp(x).unwrap();
        let mut g = ps.zeros_like();
        t.backward(y).unwrap().accumulate_into(&mut g);
        assert_eq!(g.block(b), &[0.0, 0.0]);
        assert_relative_eq!(g.block(a)[0], 2.0f64.exp());
    }

    #[test]
    fn log_of_nonpositive_names_node() {
        let mut t = Tape::new();
        let x = t.constant(&[1.0, 0.0]);
        let err = t.log(x).unwrap_err();
        match err {
            Error::Eval { node, op, .. } => {
                assert_eq!(node, 1);
                assert_eq!(op, "log");
            }
            e => panic!("unexpected {e}"),
        }
        // a failed record leaves the tape untouched
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let mut t = Tape::new();
        let a = t.scalar(1.0);
        let b = t.scalar(0.0);
        assert!(matches!(t.div(a, b), Err(Error::Eval { op: "div", .. })));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let a = t.constant(&[1.0, 2.0]);
        let b = t.exp(a).unwrap();
        assert!(matches!(t.backward(b), Err(Error::Contract(_))));
    }

    #[test]
    fn flatten_roundtrip() {
        let mut ps = ParamSet::new();
        ps.push("w", vec![2, 3], (0..6).map(f64::from).collect());
        ps.push("b", vec![2], vec![7.0, 8.0]);
        let flat: Vec<f64> = (0..8).map(|i| i as f64 * 0.5).collect();
        ps.unflatten(&flat).unwrap();
        assert_eq!(ps.flatten(), flat);
        assert!(ps.unflatten(&flat[..3]).is_err());
    }

    #[test]
    fn stable_sigmoid_extremes() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!(log_sigmoid(-1000.0).is_finite());
        assert_relative_eq!(log_sigmoid(-1000.0), -1000.0);
    }

    #[test]
    fn recording_twice_is_bit_identical() {
        let build = || {
            let mut t = Tape::new();
            let x = t.constant(&[0.3, -1.7, 2.2]);
            let s = t.softmax(x).unwrap();
            let l = t.log(s).unwrap();
            let y = t.sum(l).unwrap();
            t.scalar_value(y)
        };
        assert_eq!(build().to_bits(), build().to_bits());
    }
}
