use std::collections::{BTreeMap, HashMap};

use crate::array::{dims2, gemm, Array};
use crate::error::{Error, Result};

/// Named arrays: parameter sets, gradients and forward outputs.
pub type NamedArrays = BTreeMap<String, Array>;

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Borrowed name → array bindings for leaf nodes (inputs and parameters).
#[derive(Clone, Debug, Default)]
pub struct Feeds<'a> {
    map: HashMap<&'a str, &'a Array>,
}

impl<'a> Feeds<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &'a str, value: &'a Array) -> &mut Self {
        self.map.insert(name, value);
        self
    }

    pub fn extend(&mut self, arrays: &'a NamedArrays) -> &mut Self {
        for (name, value) in arrays {
            self.map.insert(name.as_str(), value);
        }
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Array> {
        self.map.get(name).copied()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Param(String),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Transpose(NodeId),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    RepeatCols(NodeId),
    Sum(NodeId),
    Hebb {
        trace: NodeId,
        pre: NodeId,
        post: NodeId,
        eta: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Transpose(_) => "transpose",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::RepeatCols(_) => "repeat_cols",
            Op::Sum(_) => "sum",
            Op::Hebb { .. } => "hebb_update",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    requires_grad: bool,
}

/// A recorded computation over 2-D arrays with reverse-mode gradients.
///
/// Nodes are appended in topological order; shapes are checked when a node
/// is added. [`Graph::forward`] evaluates every node from named leaf
/// bindings and [`Graph::backward`] accumulates gradients for every
/// parameter leaf.
///
/// Hebbian trace updates are recorded as nodes but never differentiated:
/// they carry state between steps, not parameters.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Array>,
    grads: Vec<Array>,
    leaves: HashMap<String, NodeId>,
    outputs: Vec<(String, NodeId)>,
    forwarded: bool,
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

    fn label(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match &node.op {
            Op::Input(name) | Op::Param(name) => format!("node #{} ({} `{name}`)", id.0, node.op.name()),
            op => format!("node #{} ({})", id.0, op.name()),
        }
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    /// Static `(rows, cols)` of a node.
    pub fn dims_of(&self, id: NodeId) -> (usize, usize) {
        self.dims(id)
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> NodeId {
        let requires_grad = match &op {
            Op::Input(_) | Op::Hebb { .. } => false,
            Op::Param(_) => true,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
            }
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Transpose(a)
            | Op::SliceRows(a, ..)
            | Op::SliceCols(a, ..)
            | Op::RepeatCols(a)
            | Op::Sum(a) => self.nodes[a.0].requires_grad,
            Op::ConcatRows(parts) => parts.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            rows,
            cols,
            requires_grad,
        });
        self.values.push(Array::default());
        self.grads.push(Array::default());
        self.forwarded = false;
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, name: &str, shape: &[usize], param: bool) -> Result<NodeId> {
        let (rows, cols) = dims2(shape);
        if let Some(&id) = self.leaves.get(name) {
            let is_param = matches!(self.nodes[id.0].op, Op::Param(_));
            if is_param != param || self.dims(id) != (rows, cols) {
                return Err(Error::shape(
                    self.label(id),
                    format!("redeclared with shape {shape:?}"),
                ));
            }
            return Ok(id);
        }
        let op = if param {
            Op::Param(name.to_string())
        } else {
            Op::Input(name.to_string())
        };
        let id = self.push(op, rows, cols);
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// Declares (or returns the existing) non-differentiable input leaf.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, false)
    }

    /// Declares (or returns the existing) differentiable parameter leaf.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, true)
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.push((name.to_string(), id));
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(
                format!("{op} of {} and {}", self.label(a), self.label(b)),
                format!("{}x{} vs {}x{}", da.0, da.1, db.0, db.1),
            ));
        }
        Ok(da)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::shape(
                format!("matmul of {} and {}", self.label(a), self.label(b)),
                format!("{m}x{k} times {k2}x{n}"),
            ));
        }
        Ok(self.push(Op::MatMul(a, b), m, n))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), r, c))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), r, c))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), r, c))
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let ((m, n), (r, c)) = (self.dims(a), self.dims(row));
        if r != 1 || c != n {
            return Err(Error::shape(
                format!("add_row of {} and {}", self.label(a), self.label(row)),
                format!("{m}x{n} plus row {r}x{c}"),
            ));
        }
        Ok(self.push(Op::AddRow(a, row), m, n))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let (r, c) = self.dims(a);
        self.push(Op::Scale(a, factor), r, c)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        self.push(Op::Tanh(a), r, c)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        self.push(Op::Sigmoid(a), r, c)
    }

    /// Row-wise softmax (max-subtracted).
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        self.push(Op::Softmax(a), r, c)
    }

    /// Row-wise log-softmax (max-subtracted).
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        self.push(Op::LogSoftmax(a), r, c)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        self.push(Op::Transpose(a), c, r)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > r {
            return Err(Error::shape(
                self.label(a),
                format!("rows {start}..{} out of {r}", start + len),
            ));
        }
        Ok(self.push(Op::SliceRows(a, start), len, c))
    }

    /// Single row `i` as a `1 × n` matrix.
    pub fn row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        self.slice_rows(a, i, 1)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > c {
            return Err(Error::shape(
                self.label(a),
                format!("cols {start}..{} out of {c}", start + len),
            ));
        }
        Ok(self.push(Op::SliceCols(a, start), r, len))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let cols = self.dims(*first).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(Error::shape(
                    format!("concat_rows part {}", self.label(p)),
                    format!("{c} columns, expected {cols}"),
                ));
            }
            rows += r;
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), rows, cols))
    }

    /// Duplicates an `m × 1` column `times` times: `v ⊗ eᵀ`.
    pub fn repeat_cols(&mut self, a: NodeId, times: usize) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if c != 1 {
            return Err(Error::shape(self.label(a), format!("repeat_cols needs a column, got {r}x{c}")));
        }
        Ok(self.push(Op::RepeatCols(a), r, times))
    }

    /// Sum of all entries as a `1 × 1` value.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), 1, 1)
    }

    /// Oja-style Hebbian trace update, excluded from differentiation:
    /// `trace[i,j] + eta * post[j] * (pre[i] - post[j] * trace[i,j])`.
    pub fn hebb_update(&mut self, trace: NodeId, pre: NodeId, post: NodeId, eta: f64) -> Result<NodeId> {
        let (ti, tj) = self.dims(trace);
        let (pr, pc) = self.dims(pre);
        let (qr, qc) = self.dims(post);
        if pr != 1 || qr != 1 || pc != ti || qc != tj {
            return Err(Error::shape(
                format!("hebb_update of {}", self.label(trace)),
                format!("trace {ti}x{tj}, pre {pr}x{pc}, post {qr}x{qc}"),
            ));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid(format!("eta {eta} outside [0, 1]")));
        }
        Ok(self.push(Op::Hebb { trace, pre, post, eta }, ti, tj))
    }

    /// Names of all parameter leaves.
    pub fn param_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.values[id.0]
    }

    /// Gradient of the last backward output with respect to `id`, if the
    /// node takes part in differentiation.
    pub fn grad(&self, id: NodeId) -> Option<&Array> {
        (self.forwarded && self.nodes[id.0].requires_grad).then(|| &self.grads[id.0])
    }

    /// Evaluates every node and returns the marked outputs.
    pub fn forward(&mut self, feeds: &Feeds<'_>) -> Result<NamedArrays> {
        self.run(feeds, false)?;
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), self.values[id.0].clone()))
            .collect())
    }

    /// Forward pass that keeps the previously computed values of trace
    /// nodes; used by the finite-difference oracle so that perturbed runs
    /// see the same frozen traces as the analytic gradient.
    pub(crate) fn forward_frozen(&mut self, feeds: &Feeds<'_>) -> Result<()> {
        if !self.forwarded {
            return Err(Error::NotForwarded);
        }
        self.run(feeds, true)
    }

    fn run(&mut self, feeds: &Feeds<'_>, freeze_traces: bool) -> Result<()> {
        self.forwarded = false;
        for i in 0..self.nodes.len() {
            let node = &self.nodes[i];
            let mut out = std::mem::take(&mut self.values[i]);
            match &node.op {
                Op::Input(name) | Op::Param(name) => {
                    let given = feeds
                        .get(name)
                        .ok_or_else(|| Error::MissingInput(name.clone()))?;
                    if given.dims2() != (node.rows, node.cols) {
                        return Err(Error::shape(
                            self.label(NodeId(i)),
                            format!(
                                "declared {}x{}, fed {:?}",
                                node.rows,
                                node.cols,
                                given.shape()
                            ),
                        ));
                    }
                    out.reset(node.rows, node.cols);
                    out.data_mut().copy_from_slice(given.data());
                }
                Op::Hebb { .. } if freeze_traces => {}
                op => eval_op(op, &self.values, &mut out, node.rows, node.cols),
            }
            self.values[i] = out;
        }
        self.forwarded = true;
        Ok(())
    }

    /// Reverse pass from `output` seeded with `seed`; returns the gradient
    /// of every parameter leaf (zeros for leaves the output does not reach).
    pub fn backward(&mut self, output: NodeId, seed: &Array) -> Result<NamedArrays> {
        if !self.forwarded {
            return Err(Error::NotForwarded);
        }
        let (r, c) = self.dims(output);
        if seed.dims2() != (r, c) {
            return Err(Error::shape(
                format!("backward seed for {}", self.label(output)),
                format!("output {r}x{c}, seed {:?}", seed.shape()),
            ));
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad {
                grad.reset(node.rows, node.cols);
            }
        }
        if self.nodes[output.0].requires_grad {
            self.grads[output.0].data_mut().copy_from_slice(seed.data());
        }

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Param(_)) {
                continue;
            }
            let upstream = std::mem::take(&mut self.grads[i]);
            backprop_op(
                &node.op,
                &self.nodes,
                &self.values,
                &self.values[i],
                &upstream,
                &mut self.grads,
            );
            self.grads[i] = upstream;
        }

        Ok(self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((name.clone(), self.grads[i].clone())),
                _ => None,
            })
            .collect())
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

fn map_into(src: &Array, out: &mut Array, rows: usize, cols: usize, f: impl Fn(f64) -> f64) {
    out.reset(rows, cols);
    for (o, &x) in out.data_mut().iter_mut().zip(src.data()) {
        *o = f(x);
    }
}

fn zip_into(a: &Array, b: &Array, out: &mut Array, rows: usize, cols: usize, f: impl Fn(f64, f64) -> f64) {
    out.reset(rows, cols);
    for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o = f(x, y);
    }
}

fn eval_op(op: &Op, values: &[Array], out: &mut Array, rows: usize, cols: usize) {
    let v = |id: &NodeId| &values[id.0];
    match op {
        Op::Input(_) | Op::Param(_) => unreachable!("leaves are bound from feeds"),
        Op::MatMul(a, b) => {
            let inner = v(a).cols();
            out.reset(rows, cols);
            gemm(rows, inner, cols, v(a).data(), false, v(b).data(), false, out.data_mut(), 0.0);
        }
        Op::Add(a, b) => zip_into(v(a), v(b), out, rows, cols, |x, y| x + y),
        Op::Sub(a, b) => zip_into(v(a), v(b), out, rows, cols, |x, y| x - y),
        Op::Mul(a, b) => zip_into(v(a), v(b), out, rows, cols, |x, y| x * y),
        Op::AddRow(a, r) => {
            out.reset(rows, cols);
            let bias = v(r).data();
            for (o_row, a_row) in out
                .data_mut()
                .chunks_exact_mut(cols)
                .zip(v(a).data().chunks_exact(cols))
            {
                for ((o, &x), &b) in o_row.iter_mut().zip(a_row).zip(bias) {
                    *o = x + b;
                }
            }
        }
        Op::Scale(a, s) => map_into(v(a), out, rows, cols, |x| x * s),
        Op::Tanh(a) => map_into(v(a), out, rows, cols, f64::tanh),
        Op::Sigmoid(a) => map_into(v(a), out, rows, cols, sigmoid),
        Op::Softmax(a) => {
            out.reset(rows, cols);
            for (o_row, a_row) in out
                .data_mut()
                .chunks_exact_mut(cols)
                .zip(v(a).data().chunks_exact(cols))
            {
                let max = a_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (o, &x) in o_row.iter_mut().zip(a_row) {
                    *o = (x - max).exp();
                    total += *o;
                }
                o_row.iter_mut().for_each(|o| *o /= total);
            }
        }
        Op::LogSoftmax(a) => {
            out.reset(rows, cols);
            for (o_row, a_row) in out
                .data_mut()
                .chunks_exact_mut(cols)
                .zip(v(a).data().chunks_exact(cols))
            {
                let max = a_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + a_row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                for (o, &x) in o_row.iter_mut().zip(a_row) {
                    *o = x - lse;
                }
            }
        }
        Op::Transpose(a) => {
            out.reset(rows, cols);
            let src = v(a).data();
            let data = out.data_mut();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] = src[c * rows + r];
                }
            }
        }
        Op::SliceRows(a, start) => {
            out.reset(rows, cols);
            out.data_mut()
                .copy_from_slice(&v(a).data()[start * cols..(start + rows) * cols]);
        }
        Op::SliceCols(a, start) => {
            out.reset(rows, cols);
            let src_cols = v(a).cols();
            for (o_row, a_row) in out
                .data_mut()
                .chunks_exact_mut(cols)
                .zip(v(a).data().chunks_exact(src_cols))
            {
                o_row.copy_from_slice(&a_row[*start..start + cols]);
            }
        }
        Op::ConcatRows(parts) => {
            out.reset(rows, cols);
            let mut offset = 0;
            for p in parts {
                let src = v(p).data();
                out.data_mut()[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        Op::RepeatCols(a) => {
            out.reset(rows, cols);
            for (o_row, &x) in out.data_mut().chunks_exact_mut(cols).zip(v(a).data()) {
                o_row.fill(x);
            }
        }
        Op::Sum(a) => {
            out.reset(1, 1);
            out.data_mut()[0] = v(a).data().iter().sum();
        }
        Op::Hebb {
            trace,
            pre,
            post,
            eta,
        } => {
            out.reset(rows, cols);
            let (h, x, y) = (v(trace).data(), v(pre).data(), v(post).data());
            for (i, (o_row, h_row)) in out
                .data_mut()
                .chunks_exact_mut(cols)
                .zip(h.chunks_exact(cols))
                .enumerate()
            {
                for ((o, &hij), &yj) in o_row.iter_mut().zip(h_row).zip(y) {
                    *o = hij + eta * yj * (x[i] - yj * hij);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Array], nodes: &[Node], id: NodeId, f: impl FnOnce(&mut [f64])) {
    if nodes[id.0].requires_grad {
        f(grads[id.0].data_mut());
    }
}

fn backprop_op(
    op: &Op,
    nodes: &[Node],
    values: &[Array],
    out: &Array,
    g: &Array,
    grads: &mut [Array],
) {
    let gd = g.data();
    let (rows, cols) = g.dims2();
    match op {
        Op::Input(_) | Op::Param(_) | Op::Hebb { .. } => {}
        Op::MatMul(a, b) => {
            let (va, vb) = (&values[a.0], &values[b.0]);
            let inner = va.cols();
            accumulate(grads, nodes, *a, |da| {
                gemm(rows, cols, inner, gd, false, vb.data(), true, da, 1.0)
            });
            accumulate(grads, nodes, *b, |db| {
                gemm(inner, rows, cols, va.data(), true, gd, false, db, 1.0)
            });
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |da| da.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
            accumulate(grads, nodes, *b, |db| db.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |da| da.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
            accumulate(grads, nodes, *b, |db| db.iter_mut().zip(gd).for_each(|(d, g)| *d -= g));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (values[a.0].data(), values[b.0].data());
            accumulate(grads, nodes, *a, |da| {
                for ((d, g), y) in da.iter_mut().zip(gd).zip(vb) {
                    *d += g * y;
                }
            });
            accumulate(grads, nodes, *b, |db| {
                for ((d, g), x) in db.iter_mut().zip(gd).zip(va) {
                    *d += g * x;
                }
            });
        }
        Op::AddRow(a, r) => {
            accumulate(grads, nodes, *a, |da| da.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
            accumulate(grads, nodes, *r, |dr| {
                for g_row in gd.chunks_exact(cols) {
                    dr.iter_mut().zip(g_row).for_each(|(d, g)| *d += g);
                }
            });
        }
        Op::Scale(a, s) => {
            accumulate(grads, nodes, *a, |da| da.iter_mut().zip(gd).for_each(|(d, g)| *d += g * s));
        }
        Op::Tanh(a) => accumulate(grads, nodes, *a, |da| {
            for ((d, g), y) in da.iter_mut().zip(gd).zip(out.data()) {
                *d += g * (1.0 - y * y);
            }
        }),
        Op::Sigmoid(a) => accumulate(grads, nodes, *a, |da| {
            for ((d, g), y) in da.iter_mut().zip(gd).zip(out.data()) {
                *d += g * y * (1.0 - y);
            }
        }),
        Op::Softmax(a) => accumulate(grads, nodes, *a, |da| {
            for ((d_row, g_row), y_row) in da
                .chunks_exact_mut(cols)
                .zip(gd.chunks_exact(cols))
                .zip(out.data().chunks_exact(cols))
            {
                let dot: f64 = g_row.iter().zip(y_row).map(|(g, y)| g * y).sum();
                for ((d, g), y) in d_row.iter_mut().zip(g_row).zip(y_row) {
                    *d += y * (g - dot);
                }
            }
        }),
        Op::LogSoftmax(a) => accumulate(grads, nodes, *a, |da| {
            for ((d_row, g_row), y_row) in da
                .chunks_exact_mut(cols)
                .zip(gd.chunks_exact(cols))
                .zip(out.data().chunks_exact(cols))
            {
                let total: f64 = g_row.iter().sum();
                for ((d, g), y) in d_row.iter_mut().zip(g_row).zip(y_row) {
                    *d += g - y.exp() * total;
                }
            }
        }),
        Op::Transpose(a) => accumulate(grads, nodes, *a, |da| {
            // g is rows x cols; a is cols x rows
            for r in 0..rows {
                for c in 0..cols {
                    da[c * rows + r] += gd[r * cols + c];
                }
            }
        }),
        Op::SliceRows(a, start) => accumulate(grads, nodes, *a, |da| {
            da[start * cols..(start + rows) * cols]
                .iter_mut()
                .zip(gd)
                .for_each(|(d, g)| *d += g);
        }),
        Op::SliceCols(a, start) => {
            let src_cols = values[a.0].cols();
            accumulate(grads, nodes, *a, |da| {
                for (d_row, g_row) in da.chunks_exact_mut(src_cols).zip(gd.chunks_exact(cols)) {
                    d_row[*start..start + cols]
                        .iter_mut()
                        .zip(g_row)
                        .for_each(|(d, g)| *d += g);
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = values[p.0].len();
                accumulate(grads, nodes, *p, |dp| {
                    dp.iter_mut()
                        .zip(&gd[offset..offset + n])
                        .for_each(|(d, g)| *d += g);
                });
                offset += n;
            }
        }
        Op::RepeatCols(a) => accumulate(grads, nodes, *a, |da| {
            for (d, g_row) in da.iter_mut().zip(gd.chunks_exact(cols)) {
                *d += g_row.iter().sum::<f64>();
            }
        }),
        Op::Sum(a) => accumulate(grads, nodes, *a, |da| da.iter_mut().for_each(|d| *d += gd[0])),
    }
}
