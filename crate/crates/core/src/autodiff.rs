//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Every primitive records its output on the [`Tape`] together with the ids
//! of its inputs. [`Tape::backward`] walks the tape in reverse recording
//! order, so each node is visited exactly once after all of its consumers.
//! Shapes are explicit: the only broadcast is [`Tape::add_bias_row`].

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn row(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::LengthMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    fn matmul(&self, other: &Tensor) -> Tensor {
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let out = &mut data[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out.iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        Tensor {
            rows: n,
            cols: m,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBiasRow(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    SoftmaxRows(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    MeanAll(NodeId),
    SumAll(NodeId),
    L1ToTarget(NodeId, Tensor),
    Transpose(NodeId),
    Reshape(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols != vb.rows {
            return Err(shape_err("matmul", va, vb));
        }
        let out = va.matmul(vb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va, vb));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_bias_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows != 1 || vb.cols != va.cols {
            return Err(shape_err("add_bias_row", va, vb));
        }
        let mut out = va.clone();
        for r in 0..out.rows {
            for (o, b) in out.data[r * out.cols..(r + 1) * out.cols]
                .iter_mut()
                .zip(&vb.data)
            {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBiasRow(a, bias)))
    }

    pub fn scalar_mul(&mut self, a: NodeId, k: f64) -> NodeId {
        let out = self.value(a).map(|v| v * k);
        self.push(out, Op::ScalarMul(a, k))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut out = va.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * va.cols..(r + 1) * va.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: (0, 0),
                rhs: (0, 0),
            });
        };
        let rows = self.value(first).rows;
        for &p in parts {
            if self.value(p).rows != rows {
                return Err(shape_err("concat_cols", self.value(first), self.value(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor { rows, cols, data };
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start > end || end > va.cols {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: va.shape(),
                rhs: (start, end),
            });
        }
        let mut data = Vec::with_capacity(va.rows * (end - start));
        for r in 0..va.rows {
            data.extend_from_slice(&va.row_slice(r)[start..end]);
        }
        let out = Tensor {
            rows: va.rows,
            cols: end - start,
            data,
        };
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let n = va.data.len();
        let mean = if n == 0 {
            0.0
        } else {
            va.data.iter().sum::<f64>() / n as f64
        };
        self.push(Tensor::scalar(mean), Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let sum = self.value(a).data.iter().sum::<f64>();
        self.push(Tensor::scalar(sum), Op::SumAll(a))
    }

    /// Mean over rows of the per-row L1 distance to `target`.
    pub fn l1_to_target(&mut self, a: NodeId, target: Tensor) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape() != target.shape() {
            return Err(shape_err("l1_to_target", va, &target));
        }
        let rows = va.rows.max(1) as f64;
        let total: f64 = va
            .data
            .iter()
            .zip(&target.data)
            .map(|(x, t)| (x - t).abs())
            .sum();
        Ok(self.push(Tensor::scalar(total / rows), Op::L1ToTarget(a, target)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let va = self.value(a);
        if va.data.len() != rows * cols {
            return Err(Error::Shape {
                op: "reshape",
                lhs: va.shape(),
                rhs: (rows, cols),
            });
        }
        let out = Tensor {
            rows,
            cols,
            data: va.data.clone(),
        };
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Gradients of a scalar loss with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_seeded(&[(loss, Tensor::scalar(1.0))])
    }

    /// Backward pass from arbitrary upstream gradients on several nodes.
    pub fn backward_seeded(&self, seeds: &[(NodeId, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, seed) in seeds {
            let v = self.value(*id);
            if v.shape() != seed.shape() {
                return Err(shape_err("backward seed", v, seed));
            }
            accumulate(&mut grads, *id, seed.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    accumulate(&mut grads, *a, g.matmul(&vb.transpose()));
                    accumulate(&mut grads, *b, va.transpose().matmul(&g));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddBiasRow(a, b) => {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in gb.data.iter_mut().zip(g.row_slice(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, gb);
                }
                Op::ScalarMul(a, k) => accumulate(&mut grads, *a, g.map(|v| v * k)),
                Op::Relu(a) => {
                    let va = self.value(*a);
                    let mut out = g.clone();
                    for (o, &x) in out.data.iter_mut().zip(&va.data) {
                        if x <= 0.0 {
                            *o = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, out);
                }
                Op::Tanh(a) => {
                    let mut out = g.clone();
                    for (o, &y) in out.data.iter_mut().zip(&node.value.data) {
                        *o *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *a, out);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut out = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row_slice(r);
                        let gr = g.row_slice(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols {
                            out.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, out);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        let mut part = Tensor::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            part.data[r * cols..(r + 1) * cols]
                                .copy_from_slice(&g.row_slice(r)[offset..offset + cols]);
                        }
                        accumulate(&mut grads, p, part);
                        offset += cols;
                    }
                }
                Op::SliceCols(a, start) => {
                    let va = self.value(*a);
                    let mut out = Tensor::zeros(va.rows, va.cols);
                    for r in 0..g.rows {
                        out.data[r * va.cols + start..r * va.cols + start + g.cols]
                            .copy_from_slice(g.row_slice(r));
                    }
                    accumulate(&mut grads, *a, out);
                }
                Op::MeanAll(a) => {
                    let va = self.value(*a);
                    let n = va.data.len().max(1) as f64;
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor::filled(va.rows, va.cols, g.item() / n),
                    );
                }
                Op::SumAll(a) => {
                    let va = self.value(*a);
                    accumulate(&mut grads, *a, Tensor::filled(va.rows, va.cols, g.item()));
                }
                Op::L1ToTarget(a, target) => {
                    let va = self.value(*a);
                    let k = g.item() / va.rows.max(1) as f64;
                    let mut out = Tensor::zeros(va.rows, va.cols);
                    for ((o, &x), &t) in out.data.iter_mut().zip(&va.data).zip(&target.data) {
                        *o = if x > t {
                            k
                        } else if x < t {
                            -k
                        } else {
                            0.0
                        };
                    }
                    accumulate(&mut grads, *a, out);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Reshape(a) => {
                    let va = self.value(*a);
                    let out = Tensor {
                        rows: va.rows,
                        cols: va.cols,
                        data: g.data.clone(),
                    };
                    accumulate(&mut grads, *a, out);
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

const CHECKPOINT_HEADER: &str = "# vecplan named tensors v1";

/// Writes `name rows cols v...` lines with round-trip exact floats.
pub fn named_tensors_to_string(tensors: &[(String, Tensor)]) -> String {
    let mut out = String::from(CHECKPOINT_HEADER);
    out.push('\n');
    for (name, t) in tensors {
        write!(out, "{name} {} {}", t.rows, t.cols).unwrap();
        for v in &t.data {
            write!(out, " {v:e}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn named_tensors_from_str(text: &str, path: &Path) -> Result<Vec<(String, Tensor)>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CHECKPOINT_HEADER => {}
        _ => return Err(err(1, format!("expected header `{CHECKPOINT_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_ascii_whitespace();
        let name = fields.next().unwrap().to_string();
        let mut dim = |what: &str| -> Result<usize> {
            fields
                .next()
                .ok_or_else(|| err(line_no, format!("missing {what}")))?
                .parse()
                .map_err(|e| err(line_no, format!("bad {what}: {e}")))
        };
        let rows = dim("rows")?;
        let cols = dim("cols")?;
        let data = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| err(line_no, format!("bad value: {e}")))?;
        let t = Tensor::new(rows, cols, data)
            .map_err(|e| err(line_no, format!("tensor `{name}`: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save_named_tensors(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, named_tensors_to_string(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load_named_tensors(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    named_tensors_from_str(&text, path)
}
