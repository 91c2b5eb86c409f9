//! A small first-order reverse-mode differentiation tape over dense 2-D tensors.
//!
//! Values are computed eagerly when a primitive is recorded. [`Tape::backward`]
//! walks the recorded nodes once in reverse order and returns vector-Jacobian
//! products for every node up to the output.
//!
//! ```
//! use conformer_core::difftape::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.square(x).unwrap();
//! let grads = tape.backward(y, &Tensor::scalar(1.0)).unwrap();
//! assert_eq!(grads.get(x).item(), 6.0);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Shared with the inner objective so both sides smooth the same singularity.
pub const EPS_NORM: f64 = 1e-10;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Row-major dense matrix. Vectors are `n × 1` columns or `1 × n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn column(values: Vec<f64>) -> Self {
        Self { rows: values.len(), cols: 1, data: values }
    }

    pub fn row(values: Vec<f64>) -> Self {
        Self { rows: 1, cols: values.len(), data: values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// The single entry of a 1×1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    fn matmul(&self, other: &Tensor) -> Tensor {
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            let row = &mut out.data[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Recordable operations. Index-carrying variants share their index buffers.
#[derive(Debug, Clone)]
pub enum Primitive {
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    /// Elementwise quotient.
    Div,
    MatMul,
    /// Sum of all entries, 1×1.
    Sum,
    /// Sum down each column, giving `1 × cols`.
    SumRows,
    /// Sum along each row, giving `rows × 1`.
    SumCols,
    /// Mean of all entries, 1×1.
    Mean,
    /// Replicate a 1×1, 1×c or r×1 tensor to `rows × cols`.
    Broadcast { rows: usize, cols: usize },
    Tanh,
    Exp,
    Log,
    Sqrt,
    Square,
    Scale(f64),
    Offset(f64),
    Clamp { lo: f64, hi: f64 },
    /// Concatenate all inputs along `axis` (`Rows` stacks vertically).
    Concat(Axis),
    Slice { axis: Axis, start: usize, len: usize },
    /// `out[k] = in[index[k]]` row-wise.
    GatherRows(Arc<[usize]>),
    /// `out[index[k]] += in[k]` row-wise into `rows` rows.
    ScatterAddRows { index: Arc<[usize]>, rows: usize },
    /// Row-wise `sqrt(|x|^2 + eps)`, giving `rows × 1`.
    SmoothedNorm { eps: f64 },
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::MatMul => "matmul",
            Primitive::Sum => "sum",
            Primitive::SumRows => "sum_rows",
            Primitive::SumCols => "sum_cols",
            Primitive::Mean => "mean",
            Primitive::Broadcast { .. } => "broadcast",
            Primitive::Tanh => "tanh",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sqrt => "sqrt",
            Primitive::Square => "square",
            Primitive::Scale(_) => "scale",
            Primitive::Offset(_) => "offset",
            Primitive::Clamp { .. } => "clamp",
            Primitive::Concat(_) => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::GatherRows(_) => "gather_rows",
            Primitive::ScatterAddRows { .. } => "scatter_add_rows",
            Primitive::SmoothedNorm { .. } => "smoothed_norm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

#[derive(Debug)]
struct Node {
    op: Option<(Primitive, Vec<usize>)>,
    value: Tensor,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Option<(Primitive, Vec<usize>)>, value: Tensor) -> Var {
        let (rows, cols) = value.shape();
        self.nodes.push(Node { op, value });
        Var { tape: self.id, id: self.nodes.len() - 1, rows, cols }
    }

    /// An input. Constants are just leaves whose gradients nobody reads.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(None, value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::ForeignVariable);
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.id].value
    }

    /// Record `prim` applied to `inputs`, computing its value now.
    pub fn record(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let arity_ok = match prim {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::MatMul => {
                inputs.len() == 2
            }
            Primitive::Concat(_) => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(shape_err(prim.name(), format!("wrong number of inputs: {}", inputs.len())));
        }
        let value = self.forward(&prim, inputs)?;
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(Some((prim, ids)), value))
    }

    fn forward(&self, prim: &Primitive, inputs: &[Var]) -> Result<Tensor> {
        let x = &self.nodes[inputs[0].id].value;
        let same_shape = |op: &'static str| -> Result<&Tensor> {
            let y = &self.nodes[inputs[1].id].value;
            if x.shape() != y.shape() {
                return Err(shape_err(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
            }
            Ok(y)
        };
        let out = match prim {
            Primitive::Add => x.zip(same_shape("add")?, |a, b| a + b),
            Primitive::Sub => x.zip(same_shape("sub")?, |a, b| a - b),
            Primitive::Mul => x.zip(same_shape("mul")?, |a, b| a * b),
            Primitive::Div => x.zip(same_shape("div")?, |a, b| a / b),
            Primitive::MatMul => {
                let y = &self.nodes[inputs[1].id].value;
                if x.cols != y.rows {
                    return Err(shape_err(
                        "matmul",
                        format!("{:?} x {:?}", x.shape(), y.shape()),
                    ));
                }
                x.matmul(y)
            }
            Primitive::Sum => Tensor::scalar(x.data.iter().sum()),
            Primitive::SumRows => {
                let mut out = Tensor::zeros(1, x.cols);
                for r in 0..x.rows {
                    for c in 0..x.cols {
                        out.data[c] += x.data[r * x.cols + c];
                    }
                }
                out
            }
            Primitive::SumCols => Tensor::column(
                (0..x.rows).map(|r| x.data[r * x.cols..(r + 1) * x.cols].iter().sum()).collect(),
            ),
            Primitive::Mean => {
                if x.is_empty() {
                    return Err(shape_err("mean", "empty tensor".into()));
                }
                Tensor::scalar(x.data.iter().sum::<f64>() / x.len() as f64)
            }
            &Primitive::Broadcast { rows, cols } => {
                let ok = (x.rows == 1 || x.rows == rows) && (x.cols == 1 || x.cols == cols);
                if !ok {
                    return Err(shape_err(
                        "broadcast",
                        format!("{:?} to {:?}", x.shape(), (rows, cols)),
                    ));
                }
                let mut out = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let sr = if x.rows == 1 { 0 } else { r };
                    for c in 0..cols {
                        let sc = if x.cols == 1 { 0 } else { c };
                        out.data[r * cols + c] = x.data[sr * x.cols + sc];
                    }
                }
                out
            }
            Primitive::Tanh => x.map(f64::tanh),
            Primitive::Exp => x.map(f64::exp),
            Primitive::Log => x.map(f64::ln),
            Primitive::Sqrt => x.map(f64::sqrt),
            Primitive::Square => x.map(|a| a * a),
            &Primitive::Scale(c) => x.map(|a| c * a),
            &Primitive::Offset(c) => x.map(|a| a + c),
            &Primitive::Clamp { lo, hi } => x.map(|a| a.clamp(lo, hi)),
            Primitive::Concat(axis) => {
                let parts: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.id].value).collect();
                concat(parts, *axis)?
            }
            &Primitive::Slice { axis, start, len } => {
                let extent = match axis {
                    Axis::Rows => x.rows,
                    Axis::Cols => x.cols,
                };
                if start + len > extent {
                    return Err(shape_err(
                        "slice",
                        format!("range {start}..{} out of bounds for extent {extent}", start + len),
                    ));
                }
                match axis {
                    Axis::Rows => Tensor {
                        rows: len,
                        cols: x.cols,
                        data: x.data[start * x.cols..(start + len) * x.cols].to_vec(),
                    },
                    Axis::Cols => {
                        let mut out = Tensor::zeros(x.rows, len);
                        for r in 0..x.rows {
                            out.data[r * len..(r + 1) * len]
                                .copy_from_slice(&x.data[r * x.cols + start..r * x.cols + start + len]);
                        }
                        out
                    }
                }
            }
            Primitive::GatherRows(index) => {
                if let Some(&bad) = index.iter().find(|&&i| i >= x.rows) {
                    return Err(shape_err(
                        "gather_rows",
                        format!("row {bad} out of bounds for {} rows", x.rows),
                    ));
                }
                let mut out = Tensor::zeros(index.len(), x.cols);
                for (k, &i) in index.iter().enumerate() {
                    out.data[k * x.cols..(k + 1) * x.cols]
                        .copy_from_slice(&x.data[i * x.cols..(i + 1) * x.cols]);
                }
                out
            }
            Primitive::ScatterAddRows { index, rows } => {
                if index.len() != x.rows {
                    return Err(shape_err(
                        "scatter_add_rows",
                        format!("{} indices for {} rows", index.len(), x.rows),
                    ));
                }
                if let Some(&bad) = index.iter().find(|&&i| i >= *rows) {
                    return Err(shape_err(
                        "scatter_add_rows",
                        format!("target row {bad} out of bounds for {rows} rows"),
                    ));
                }
                let mut out = Tensor::zeros(*rows, x.cols);
                for (k, &i) in index.iter().enumerate() {
                    for c in 0..x.cols {
                        out.data[i * x.cols + c] += x.data[k * x.cols + c];
                    }
                }
                out
            }
            &Primitive::SmoothedNorm { eps } => Tensor::column(
                (0..x.rows)
                    .map(|r| {
                        let row = &x.data[r * x.cols..(r + 1) * x.cols];
                        (row.iter().map(|a| a * a).sum::<f64>() + eps).sqrt()
                    })
                    .collect(),
            ),
        };
        Ok(out)
    }

    /// Vector-Jacobian products of `seed · output` with respect to every
    /// node recorded up to `output`.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        self.check(output)?;
        if seed.shape() != output.shape() {
            return Err(shape_err(
                "backward",
                format!("seed {:?} for output {:?}", seed.shape(), output.shape()),
            ));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.id + 1];
        adj[output.id] = Some(seed.clone());
        for id in (0..=output.id).rev() {
            let Some((prim, inputs)) = &self.nodes[id].op else { continue };
            let Some(g) = adj[id].take() else { continue };
            let contributions = self.vjp(prim, inputs, id, &g);
            adj[id] = Some(g);
            for (input, contrib) in inputs.iter().zip(contributions) {
                match &mut adj[*input] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { tape: self.id, adj })
    }

    fn vjp(&self, prim: &Primitive, inputs: &[usize], id: usize, g: &Tensor) -> Vec<Tensor> {
        let val = |i: usize| &self.nodes[inputs[i]].value;
        let y = &self.nodes[id].value;
        match prim {
            Primitive::Add => vec![g.clone(), g.clone()],
            Primitive::Sub => vec![g.clone(), g.map(|a| -a)],
            Primitive::Mul => vec![g.zip(val(1), |a, b| a * b), g.zip(val(0), |a, b| a * b)],
            Primitive::Div => {
                let (a, b) = (val(0), val(1));
                let ga = g.zip(b, |gi, bi| gi / bi);
                let mut gb = g.zip(a, |gi, ai| -gi * ai);
                for (x, bi) in gb.data.iter_mut().zip(&b.data) {
                    *x /= bi * bi;
                }
                vec![ga, gb]
            }
            Primitive::MatMul => {
                let (a, b) = (val(0), val(1));
                vec![g.matmul(&b.transpose()), a.transpose().matmul(g)]
            }
            Primitive::Sum => {
                let x = val(0);
                vec![Tensor::filled(x.rows, x.cols, g.item())]
            }
            Primitive::SumRows => {
                let x = val(0);
                let mut out = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    out.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(&g.data);
                }
                vec![out]
            }
            Primitive::SumCols => {
                let x = val(0);
                let mut out = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    out.data[r * x.cols..(r + 1) * x.cols].fill(g.data[r]);
                }
                vec![out]
            }
            Primitive::Mean => {
                let x = val(0);
                vec![Tensor::filled(x.rows, x.cols, g.item() / x.len() as f64)]
            }
            Primitive::Broadcast { .. } => {
                let x = val(0);
                let mut out = Tensor::zeros(x.rows, x.cols);
                for r in 0..g.rows {
                    let sr = if x.rows == 1 { 0 } else { r };
                    for c in 0..g.cols {
                        let sc = if x.cols == 1 { 0 } else { c };
                        out.data[sr * x.cols + sc] += g.data[r * g.cols + c];
                    }
                }
                vec![out]
            }
            Primitive::Tanh => vec![g.zip(y, |gi, yi| gi * (1.0 - yi * yi))],
            Primitive::Exp => vec![g.zip(y, |gi, yi| gi * yi)],
            Primitive::Log => vec![g.zip(val(0), |gi, xi| gi / xi)],
            Primitive::Sqrt => vec![g.zip(y, |gi, yi| gi / (2.0 * yi))],
            Primitive::Square => vec![g.zip(val(0), |gi, xi| 2.0 * xi * gi)],
            &Primitive::Scale(c) => vec![g.map(|a| c * a)],
            Primitive::Offset(_) => vec![g.clone()],
            &Primitive::Clamp { lo, hi } => {
                vec![g.zip(val(0), |gi, xi| if xi >= lo && xi <= hi { gi } else { 0.0 })]
            }
            Primitive::Concat(axis) => {
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|&i| {
                        let x = &self.nodes[i].value;
                        let part = match axis {
                            Axis::Rows => Tensor {
                                rows: x.rows,
                                cols: x.cols,
                                data: g.data[offset * g.cols..(offset + x.rows) * g.cols].to_vec(),
                            },
                            Axis::Cols => {
                                let mut t = Tensor::zeros(x.rows, x.cols);
                                for r in 0..x.rows {
                                    t.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(
                                        &g.data[r * g.cols + offset..r * g.cols + offset + x.cols],
                                    );
                                }
                                t
                            }
                        };
                        offset += match axis {
                            Axis::Rows => x.rows,
                            Axis::Cols => x.cols,
                        };
                        part
                    })
                    .collect()
            }
            &Primitive::Slice { axis, start, len } => {
                let x = val(0);
                let mut out = Tensor::zeros(x.rows, x.cols);
                match axis {
                    Axis::Rows => out.data[start * x.cols..(start + len) * x.cols]
                        .copy_from_slice(&g.data),
                    Axis::Cols => {
                        for r in 0..x.rows {
                            out.data[r * x.cols + start..r * x.cols + start + len]
                                .copy_from_slice(&g.data[r * len..(r + 1) * len]);
                        }
                    }
                }
                vec![out]
            }
            Primitive::GatherRows(index) => {
                let x = val(0);
                let mut out = Tensor::zeros(x.rows, x.cols);
                for (k, &i) in index.iter().enumerate() {
                    for c in 0..x.cols {
                        out.data[i * x.cols + c] += g.data[k * x.cols + c];
                    }
                }
                vec![out]
            }
            Primitive::ScatterAddRows { index, .. } => {
                let x = val(0);
                let mut out = Tensor::zeros(x.rows, x.cols);
                for (k, &i) in index.iter().enumerate() {
                    out.data[k * x.cols..(k + 1) * x.cols]
                        .copy_from_slice(&g.data[i * x.cols..(i + 1) * x.cols]);
                }
                vec![out]
            }
            Primitive::SmoothedNorm { .. } => {
                let x = val(0);
                let mut out = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let s = g.data[r] / y.data[r];
                    for c in 0..x.cols {
                        out.data[r * x.cols + c] = s * x.data[r * x.cols + c];
                    }
                }
                vec![out]
            }
        }
    }

    // Convenience wrappers.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::Div, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::MatMul, &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Sum, &[a])
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::SumRows, &[a])
    }

    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::SumCols, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Mean, &[a])
    }

    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        if a.shape() == (rows, cols) {
            return Ok(a);
        }
        self.record(Primitive::Broadcast { rows, cols }, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Tanh, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Log, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Sqrt, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Square, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Primitive::Scale(c), &[a])
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Primitive::Offset(c), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.record(Primitive::Clamp { lo, hi }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        self.record(Primitive::Concat(axis), parts)
    }

    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        self.record(Primitive::Slice { axis, start, len }, &[a])
    }

    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        self.record(Primitive::GatherRows(index), &[a])
    }

    pub fn scatter_add_rows(&mut self, a: Var, index: Arc<[usize]>, rows: usize) -> Result<Var> {
        self.record(Primitive::ScatterAddRows { index, rows }, &[a])
    }

    pub fn smoothed_norm(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::SmoothedNorm { eps: EPS_NORM }, &[a])
    }

    /// `a · b + bias` with `bias` a `1 × cols` row broadcast over rows.
    pub fn affine(&mut self, a: Var, w: Var, bias: Var) -> Result<Var> {
        let prod = self.matmul(a, w)?;
        let b = self.broadcast(bias, prod.rows, prod.cols)?;
        self.add(prod, b)
    }
}

fn concat(parts: Vec<&Tensor>, axis: Axis) -> Result<Tensor> {
    match axis {
        Axis::Rows => {
            let cols = parts[0].cols;
            if parts.iter().any(|p| p.cols != cols) {
                return Err(shape_err("concat", "column counts differ".into()));
            }
            let rows = parts.iter().map(|p| p.rows).sum();
            let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
            Ok(Tensor { rows, cols, data })
        }
        Axis::Cols => {
            let rows = parts[0].rows;
            if parts.iter().any(|p| p.rows != rows) {
                return Err(shape_err("concat", "row counts differ".into()));
            }
            let cols: usize = parts.iter().map(|p| p.cols).sum();
            let mut out = Tensor::zeros(rows, cols);
            for r in 0..rows {
                let mut off = 0;
                for p in &parts {
                    out.data[r * cols + off..r * cols + off + p.cols]
                        .copy_from_slice(&p.data[r * p.cols..(r + 1) * p.cols]);
                    off += p.cols;
                }
            }
            Ok(out)
        }
    }
}

/// Adjoints from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "variable from another tape");
        self.adj
            .get(v.id)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(v.rows, v.cols))
    }
}
