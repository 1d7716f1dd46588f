//! Define-by-run reverse-mode differentiation.
//!
//! Every operation pushes a node holding its output value and the handles of
//! its inputs. Nodes are appended in evaluation order, so the node list is a
//! topological order by construction and [`Tape::backward`] is a single
//! reverse sweep. A tape is built per forward pass and then dropped.

use std::cell::{Ref, RefCell};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Unary(UnaryOp, Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    Nll {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    RepeatRows(Var, usize),
    WeightedRowSum(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Sum(Var),
    RowSum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    tracks: bool,
}

/// Recorded computation. Operations take `&self` so handles stay `Copy`.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    // Row-major a is m×k (or k×m when transposed), b is k×n (or n×k).
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths are checked above against the strides passed in.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::dim(op, t.shape(), &[0, 0]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn softmax_row(x: &[f64], mask: Option<&[bool]>, out: &mut [f64]) -> Result<()> {
    let live = |i: usize| mask.is_none_or(|m| m[i]);
    let max = (0..x.len())
        .filter(|&i| live(i))
        .map(|i| x[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidMask);
    }
    let mut total = 0.0;
    for i in 0..x.len() {
        out[i] = if live(i) { (x[i] - max).exp() } else { 0.0 };
        total += out[i];
    }
    out.iter_mut().for_each(|v| *v /= total);
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input tensor; it is differentiated iff `requires_grad` is set.
    pub fn leaf(&self, tensor: Tensor) -> Var {
        let tracks = tensor.requires_grad();
        self.push(tensor, Op::Leaf, tracks)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn to_vec(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].value.data().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    fn push(&self, value: Tensor, op: Op, tracks: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracks });
        Var(nodes.len() - 1)
    }

    fn tracks(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].tracks)
    }

    fn derived(&self, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let tracks = self.tracks(inputs);
        let value = Tensor::new(shape, data).expect("op produced consistent shape");
        self.push(value, op, tracks)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n, out) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = rank2("matmul", ta)?;
            let (k2, n) = rank2("matmul", tb)?;
            if k != k2 {
                return Err(Error::dim("matmul", ta.shape(), tb.shape()));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
            (m, k, n, out)
        };
        let _ = k;
        Ok(self.derived(&[m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(&self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let f = |x: f64, y: f64| match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
            };
            if ta.shape() == tb.shape() {
                let out = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                (ta.shape().to_vec(), out)
            } else if tb.numel() == 1 {
                let y = tb.item();
                (
                    ta.shape().to_vec(),
                    ta.data().iter().map(|&x| f(x, y)).collect(),
                )
            } else if ta.numel() == 1 {
                let x = ta.item();
                (
                    tb.shape().to_vec(),
                    tb.data().iter().map(|&y| f(x, y)).collect(),
                )
            } else {
                let name = match op {
                    BinaryOp::Add => "add",
                    BinaryOp::Sub => "sub",
                    BinaryOp::Mul => "mul",
                };
                return Err(Error::dim(name, ta.shape(), tb.shape()));
            }
        };
        Ok(self.derived(&shape, out, Op::Binary(op, a, b), &[a, b]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// `a[m×n] + bias[n]`, broadcasting the bias over rows.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[bias.0].value);
            let (_, n) = ta.dims2();
            if tb.numel() != n {
                return Err(Error::dim("add_row", ta.shape(), tb.shape()));
            }
            let bias_data = tb.data();
            let out = ta
                .data()
                .chunks(n)
                .flat_map(|row| row.iter().zip(bias_data).map(|(x, b)| x + b))
                .collect();
            (ta.shape().to_vec(), out)
        };
        Ok(self.derived(&shape, out, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let (shape, out) = {
            let t = self.value(a);
            (t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())
        };
        self.derived(&shape, out, Op::Scale(a, c), &[a])
    }

    pub fn add_const(&self, a: Var, c: f64) -> Var {
        let (shape, out) = {
            let t = self.value(a);
            (t.shape().to_vec(), t.data().iter().map(|x| x + c).collect())
        };
        self.derived(&shape, out, Op::AddConst(a), &[a])
    }

    fn unary(&self, op: UnaryOp, a: Var) -> Result<Var> {
        let (shape, out) = {
            let t = self.value(a);
            match op {
                UnaryOp::Log => {
                    if let Some(bad) = t.data().iter().find(|&&x| x <= 0.0) {
                        return Err(Error::Domain {
                            op: "log",
                            detail: format!("non-positive input {bad}"),
                        });
                    }
                }
                UnaryOp::Sqrt => {
                    if let Some(bad) = t.data().iter().find(|&&x| x < 0.0) {
                        return Err(Error::Domain {
                            op: "sqrt",
                            detail: format!("negative input {bad}"),
                        });
                    }
                }
                _ => {}
            }
            let f = |x: f64| match op {
                UnaryOp::Neg => -x,
                UnaryOp::Tanh => x.tanh(),
                UnaryOp::Sigmoid => 1.0 / (1.0 + (-x).exp()),
                UnaryOp::Exp => x.exp(),
                UnaryOp::Log => x.ln(),
                UnaryOp::Sqrt => x.sqrt(),
            };
            (t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        };
        Ok(self.derived(&shape, out, Op::Unary(op, a), &[a]))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a).expect("neg is total")
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a).expect("tanh is total")
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a).expect("exp is total")
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let (shape, out) = {
            let t = self.value(a);
            (
                t.shape().to_vec(),
                t.data().iter().map(|x| x.clamp(lo, hi)).collect(),
            )
        };
        self.derived(&shape, out, Op::Clamp(a, lo, hi), &[a])
    }

    /// Softmax over the last axis. `mask`, when given, covers every element;
    /// masked entries are treated as `-inf` logits and come out exactly zero.
    pub fn softmax(&self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (shape, out) = {
            let t = self.value(a);
            if let Some(m) = mask {
                if m.len() != t.numel() {
                    return Err(Error::dim("softmax", t.shape(), &[m.len()]));
                }
            }
            let (_, n) = t.dims2();
            let mut out = vec![0.0; t.numel()];
            for (r, (row, dst)) in t.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
                softmax_row(row, mask.map(|m| &m[r * n..(r + 1) * n]), dst)?;
            }
            (t.shape().to_vec(), out)
        };
        Ok(self.derived(&shape, out, Op::Softmax(a), &[a]))
    }

    /// `sum_r weights[r] * -log softmax(logits[r])[targets[r]]` as a scalar.
    pub fn nll(&self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (loss, probs) = {
            let t = self.value(logits);
            let (rows, v) = rank2("nll", &t)?;
            if targets.len() != rows || weights.len() != rows {
                return Err(Error::dim(
                    "nll",
                    t.shape(),
                    &[targets.len(), weights.len()],
                ));
            }
            if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
                return Err(Error::Validation(format!(
                    "target id {bad} outside vocabulary of size {v}"
                )));
            }
            let mut probs = vec![0.0; rows * v];
            let mut loss = 0.0;
            for r in 0..rows {
                let row = &t.data()[r * v..(r + 1) * v];
                softmax_row(row, None, &mut probs[r * v..(r + 1) * v])?;
                if weights[r] != 0.0 {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                    loss += weights[r] * (lse - row[targets[r]]);
                }
            }
            (loss, probs)
        };
        let op = Op::Nll {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            probs,
        };
        Ok(self.derived(&[1], vec![loss], op, &[logits]))
    }

    /// Selects rows of a matrix; repeated indices accumulate on the way back.
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let (cols, out) = {
            let t = self.value(a);
            let (rows, cols) = rank2("gather_rows", &t)?;
            if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
                return Err(Error::Validation(format!(
                    "row index {bad} out of range for {rows} rows"
                )));
            }
            if indices.is_empty() {
                return Err(Error::Validation("gather_rows with no indices".into()));
            }
            let mut out = Vec::with_capacity(indices.len() * cols);
            for &i in indices {
                out.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
            }
            (cols, out)
        };
        Ok(self.derived(
            &[indices.len(), cols],
            out,
            Op::GatherRows(a, indices.to_vec()),
            &[a],
        ))
    }

    /// `[B×C] -> [B*times × C]`, row `b*times + i` a copy of row `b`.
    pub fn repeat_rows(&self, a: Var, times: usize) -> Result<Var> {
        let (rows, cols, out) = {
            let t = self.value(a);
            let (rows, cols) = rank2("repeat_rows", &t)?;
            let mut out = Vec::with_capacity(rows * times * cols);
            for row in t.data().chunks(cols) {
                for _ in 0..times {
                    out.extend_from_slice(row);
                }
            }
            (rows, cols, out)
        };
        Ok(self.derived(&[rows * times, cols], out, Op::RepeatRows(a, times), &[a]))
    }

    /// Per-group weighted sum: `out[b] = sum_i w[b,i] * values[b*n + i]`.
    pub fn weighted_row_sum(&self, weights: Var, values: Var) -> Result<Var> {
        let (b, d, out) = {
            let nodes = self.nodes.borrow();
            let (tw, tv) = (&nodes[weights.0].value, &nodes[values.0].value);
            let (b, n) = rank2("weighted_row_sum", tw)?;
            let (rows, d) = rank2("weighted_row_sum", tv)?;
            if rows != b * n {
                return Err(Error::dim("weighted_row_sum", tw.shape(), tv.shape()));
            }
            let mut out = vec![0.0; b * d];
            for g in 0..b {
                let dst = &mut out[g * d..(g + 1) * d];
                for i in 0..n {
                    let w = tw.data()[g * n + i];
                    if w == 0.0 {
                        continue;
                    }
                    let src = &tv.data()[(g * n + i) * d..(g * n + i + 1) * d];
                    dst.iter_mut().zip(src).for_each(|(o, s)| *o += w * s);
                }
            }
            (b, d, out)
        };
        Ok(self.derived(
            &[b, d],
            out,
            Op::WeightedRowSum(weights, values),
            &[weights, values],
        ))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let (rows, total, out) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0].value;
            let rows = first.dims2().0;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let t = &nodes[p.0].value;
                let (r, c) = t.dims2();
                if r != rows {
                    return Err(Error::dim("concat_cols", first.shape(), t.shape()));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[p.0].value.data()[r * w..(r + 1) * w]);
                }
            }
            (rows, total, out)
        };
        Ok(self.derived(&[rows, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, out) = {
            let t = self.value(a);
            let (rows, cols) = t.dims2();
            if start >= end || end > cols {
                return Err(Error::dim("slice_cols", t.shape(), &[start, end]));
            }
            let out = t
                .data()
                .chunks(cols)
                .flat_map(|row| row[start..end].iter().copied())
                .collect();
            (rows, out)
        };
        Ok(self.derived(&[rows, end - start], out, Op::SliceCols(a, start), &[a]))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let data = {
            let t = self.value(a);
            if shape.iter().product::<usize>() != t.numel() {
                return Err(Error::dim("reshape", t.shape(), shape));
            }
            t.data().to_vec()
        };
        Ok(self.derived(shape, data, Op::Reshape(a), &[a]))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.derived(&[1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `[m×n] -> [m×1]`.
    pub fn row_sum(&self, a: Var) -> Var {
        let (rows, out) = {
            let t = self.value(a);
            let (rows, cols) = t.dims2();
            (
                rows,
                t.data().chunks(cols).map(|r| r.iter().sum()).collect(),
            )
        };
        self.derived(&[rows, 1], out, Op::RowSum(a), &[a])
    }

    /// Reverse sweep from a scalar `root`, seeded with 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.numel() != 1 {
            return Err(Error::dim("backward", nodes[root.0].value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &nodes[idx];
            if !node.tracks {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("backward at node {idx}")));
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let wants = |v: Var| nodes[v.0].tracks;
    let out = node.value.data();

    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            let n = tb.shape()[1];
            if wants(*a) {
                let da = slot(grads, *a, m * k);
                gemm(m, n, k, g, false, tb.data(), true, da, 1.0);
            }
            if wants(*b) {
                let db = slot(grads, *b, k * n);
                gemm(k, m, n, ta.data(), true, g, false, db, 1.0);
            }
        }
        Op::Binary(op, a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let la = ta.numel();
            let lb = tb.numel();
            let n = g.len();
            let at = |t: &Tensor, i: usize| {
                if t.numel() == 1 {
                    t.data()[0]
                } else {
                    t.data()[i]
                }
            };
            for (side, v, len) in [(0, *a, la), (1, *b, lb)] {
                if !wants(v) {
                    continue;
                }
                let dst = slot(grads, v, len);
                for i in 0..n {
                    let local = match (op, side) {
                        (BinaryOp::Add, _) => g[i],
                        (BinaryOp::Sub, 0) => g[i],
                        (BinaryOp::Sub, _) => -g[i],
                        (BinaryOp::Mul, 0) => g[i] * at(tb, i),
                        (BinaryOp::Mul, _) => g[i] * at(ta, i),
                    };
                    if len == 1 {
                        dst[0] += local;
                    } else {
                        dst[i] += local;
                    }
                }
            }
        }
        Op::AddRow(a, bias) => {
            if wants(*a) {
                let dst = slot(grads, *a, g.len());
                dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            if wants(*bias) {
                let n = val(*bias).numel();
                let dst = slot(grads, *bias, n);
                for row in g.chunks(n) {
                    dst.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                }
            }
        }
        Op::Scale(a, c) => {
            let dst = slot(grads, *a, g.len());
            dst.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
        }
        Op::AddConst(a) | Op::Reshape(a) => {
            let dst = slot(grads, *a, g.len());
            dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
        }
        Op::Unary(op, a) => {
            let input = val(*a).data();
            let dst = slot(grads, *a, g.len());
            for i in 0..g.len() {
                let local = match op {
                    UnaryOp::Neg => -1.0,
                    UnaryOp::Tanh => 1.0 - out[i] * out[i],
                    UnaryOp::Sigmoid => out[i] * (1.0 - out[i]),
                    UnaryOp::Exp => out[i],
                    UnaryOp::Log => 1.0 / input[i],
                    UnaryOp::Sqrt => {
                        if out[i] > 0.0 {
                            0.5 / out[i]
                        } else {
                            0.0
                        }
                    }
                };
                dst[i] += g[i] * local;
            }
        }
        Op::Clamp(a, lo, hi) => {
            let input = val(*a).data();
            let dst = slot(grads, *a, g.len());
            for i in 0..g.len() {
                if input[i] >= *lo && input[i] <= *hi {
                    dst[i] += g[i];
                }
            }
        }
        Op::Softmax(a) => {
            let (_, n) = node.value.dims2();
            let dst = slot(grads, *a, g.len());
            for ((y, gy), d) in out.chunks(n).zip(g.chunks(n)).zip(dst.chunks_mut(n)) {
                let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                for i in 0..n {
                    d[i] += y[i] * (gy[i] - dot);
                }
            }
        }
        Op::Nll {
            logits,
            targets,
            weights,
            probs,
        } => {
            let v = val(*logits).shape()[1];
            let dst = slot(grads, *logits, probs.len());
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                if w == 0.0 {
                    continue;
                }
                let scale = g[0] * w;
                let row = &mut dst[r * v..(r + 1) * v];
                for (d, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                    *d += scale * p;
                }
                row[t] -= scale;
            }
        }
        Op::GatherRows(a, indices) => {
            let src = val(*a);
            let cols = src.shape()[1];
            let dst = slot(grads, *a, src.numel());
            for (k, &i) in indices.iter().enumerate() {
                let gr = &g[k * cols..(k + 1) * cols];
                dst[i * cols..(i + 1) * cols]
                    .iter_mut()
                    .zip(gr)
                    .for_each(|(d, x)| *d += x);
            }
        }
        Op::RepeatRows(a, times) => {
            let src = val(*a);
            let cols = src.shape()[1];
            let dst = slot(grads, *a, src.numel());
            for (r, gr) in g.chunks(cols).enumerate() {
                let b = r / times;
                dst[b * cols..(b + 1) * cols]
                    .iter_mut()
                    .zip(gr)
                    .for_each(|(d, x)| *d += x);
            }
        }
        Op::WeightedRowSum(w, v) => {
            let (tw, tv) = (val(*w), val(*v));
            let (b, n) = (tw.shape()[0], tw.shape()[1]);
            let d = tv.shape()[1];
            if wants(*w) {
                let dw = slot(grads, *w, b * n);
                for grp in 0..b {
                    let gg = &g[grp * d..(grp + 1) * d];
                    for i in 0..n {
                        let row = &tv.data()[(grp * n + i) * d..(grp * n + i + 1) * d];
                        dw[grp * n + i] += gg.iter().zip(row).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if wants(*v) {
                let dv = slot(grads, *v, tv.numel());
                for grp in 0..b {
                    let gg = &g[grp * d..(grp + 1) * d];
                    for i in 0..n {
                        let wt = tw.data()[grp * n + i];
                        if wt == 0.0 {
                            continue;
                        }
                        let row = &mut dv[(grp * n + i) * d..(grp * n + i + 1) * d];
                        row.iter_mut().zip(gg).for_each(|(o, x)| *o += wt * x);
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.shape()[1];
            let rows = node.value.shape()[0];
            let mut offset = 0;
            for p in parts {
                let w = val(*p).dims2().1;
                if wants(*p) {
                    let dst = slot(grads, *p, rows * w);
                    for r in 0..rows {
                        let src = &g[r * total + offset..r * total + offset + w];
                        dst[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, x)| *d += x);
                    }
                }
                offset += w;
            }
        }
        Op::SliceCols(a, start) => {
            let src = val(*a);
            let (_, cols) = src.dims2();
            let w = node.value.shape()[1];
            let dst = slot(grads, *a, src.numel());
            for (r, gr) in g.chunks(w).enumerate() {
                dst[r * cols + start..r * cols + start + w]
                    .iter_mut()
                    .zip(gr)
                    .for_each(|(d, x)| *d += x);
            }
        }
        Op::Sum(a) => {
            let n = val(*a).numel();
            let dst = slot(grads, *a, n);
            dst.iter_mut().for_each(|d| *d += g[0]);
        }
        Op::RowSum(a) => {
            let src = val(*a);
            let (_, cols) = src.dims2();
            let dst = slot(grads, *a, src.numel());
            for (r, d) in dst.chunks_mut(cols).enumerate() {
                d.iter_mut().for_each(|x| *x += g[r]);
            }
        }
    }
}
