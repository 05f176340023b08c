use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    RowDot(Var, Var),
    MeanRows(Var),
    Sum(Var),
    Reshape(Var),
    /// Scalar produced by an external function whose local gradient was
    /// evaluated at record time.
    Fused { input: Var, local_grad: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Define-by-run tape of primitive operations.
///
/// Nodes are appended in creation order and `backward` walks them in exact
/// reverse. A node used by several downstream operations receives the sum of
/// all their contributions.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub(super) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, contribution: Vec<f64>) {
    match &mut grads[var.0] {
        Some(g) => {
            for (acc, c) in g.iter_mut().zip(contribution) {
                *acc += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn node_tensor(&self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("primitive produced inconsistent shape")
    }

    /// Records a leaf; gradients flow to it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let tracked = tensor.requires_grad();
        let mut value = tensor.clone();
        let _ = value.set_grad(None);
        self.push(value, Op::Leaf, tracked)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        let value = tensor.clone().with_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `x` that blocks gradient flow back into `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone().with_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, x: Var) -> &Tensor {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `x`.
    pub fn grad(&self, x: Var) -> Option<&[f64]> {
        self.nodes[x.0].value.grad()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = self.node_tensor(vec![m, n], data);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    /// Adds the vector `bias` to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.numel() != tx.cols() || tb.rows() != 1 {
            return Err(Error::Dimension {
                op: "add_row_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let cols = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % cols])
            .collect();
        let value = self.node_tensor(tx.shape().to_vec(), data);
        let tracked = self.tracked(&[x, bias]);
        Ok(self.push(value, Op::AddRowBias(x, bias), tracked))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = self.node_tensor(ta.shape().to_vec(), data);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = self.node_tensor(ta.shape().to_vec(), data);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * k).collect();
        let value = self.node_tensor(ta.shape().to_vec(), data);
        let tracked = self.tracked(&[a]);
        self.push(value, Op::Scale(a, k), tracked)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| gelu_scalar(x)).collect();
        let value = self.node_tensor(ta.shape().to_vec(), data);
        let tracked = self.tracked(&[a]);
        self.push(value, Op::Gelu(a), tracked)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        let value = self.node_tensor(ta.shape().to_vec(), data);
        let tracked = self.tracked(&[a]);
        self.push(value, Op::Sigmoid(a), tracked)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = self.node_tensor(ta.shape().to_vec(), data);
        let tracked = self.tracked(&[a]);
        self.push(value, Op::SoftmaxRows(a), tracked)
    }

    /// Standardizes each row with its population variance plus `eps`,
    /// then applies `gain` and `bias`.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps >= 0.0) {
            return Err(Error::invalid(format!("layer norm eps must be >= 0, got {eps}")));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, cols) = (tx.rows(), tx.cols());
        if tg.numel() != cols || tb.numel() != cols {
            return Err(Error::Dimension {
                op: "layer_norm_rows",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let mut normalized = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let denom = var + eps;
            if denom <= 0.0 {
                return Err(Error::invalid(
                    "layer norm of a constant row with eps = 0 is undefined",
                ));
            }
            let istd = 1.0 / denom.sqrt();
            inv_std[r] = istd;
            for c in 0..cols {
                let xh = (row[c] - mean) * istd;
                normalized[r * cols + c] = xh;
                out[r * cols + c] = xh * tg.data()[c] + tb.data()[c];
            }
        }
        let value = self.node_tensor(tx.shape().to_vec(), out);
        let tracked = self.tracked(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            tracked,
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.concat_rows_many(&[a, b])
    }

    /// Stacks the row views of `parts`; vectors count as one row each.
    pub fn concat_rows_many(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_rows needs at least one input"));
        };
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = self.node_tensor(vec![rows, cols], data);
        let tracked = self.tracked(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), tracked))
    }

    /// Rows `from..to` of `x`.
    pub fn slice_rows(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let tx = self.value(x);
        if from >= to || to > tx.rows() {
            return Err(Error::invalid(format!(
                "slice_rows {from}..{to} out of range for {} rows",
                tx.rows()
            )));
        }
        let cols = tx.cols();
        let data = tx.data()[from * cols..to * cols].to_vec();
        let value = self.node_tensor(vec![to - from, cols], data);
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::SliceRows(x, from), tracked))
    }

    /// Places the matrices in `parts` side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_cols needs at least one input"));
        };
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = self.node_tensor(vec![rows, cols], data);
        let tracked = self.tracked(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Columns `from..to` of `x`.
    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let tx = self.value(x);
        if from >= to || to > tx.cols() {
            return Err(Error::invalid(format!(
                "slice_cols {from}..{to} out of range for {} columns",
                tx.cols()
            )));
        }
        let rows = tx.rows();
        let mut data = Vec::with_capacity(rows * (to - from));
        for r in 0..rows {
            data.extend_from_slice(&tx.row(r)[from..to]);
        }
        let value = self.node_tensor(vec![rows, to - from], data);
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::SliceCols(x, from), tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        let data = transpose_raw(tx.data(), rows, cols);
        let value = self.node_tensor(vec![cols, rows], data);
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Transpose(x), tracked)
    }

    /// Dot product of matching rows: `out[i] = a[i,:] · b[i,:]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = (0..ta.rows())
            .map(|r| ta.row(r).iter().zip(tb.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        let value = self.node_tensor(vec![ta.rows()], data);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::RowDot(a, b), tracked))
    }

    /// Column means, as a 1×n matrix.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for (d, v) in data.iter_mut().zip(tx.row(r)) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= rows as f64;
        }
        let value = self.node_tensor(vec![1, cols], data);
        let tracked = self.tracked(&[x]);
        self.push(value, Op::MeanRows(x), tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), tracked)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let value = Tensor::new(shape.to_vec(), tx.data().to_vec()).map_err(|_| Error::Dimension {
            op: "reshape",
            lhs: tx.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Records a scalar computed outside the graph from `input`, together with
    /// its gradient with respect to `input`.
    pub fn fused_scalar(&mut self, input: Var, value: f64, local_grad: Vec<f64>) -> Result<Var> {
        if local_grad.len() != self.value(input).numel() {
            return Err(Error::Dimension {
                op: "fused_scalar",
                lhs: self.value(input).shape().to_vec(),
                rhs: vec![local_grad.len()],
            });
        }
        let tracked = self.tracked(&[input]);
        Ok(self.push(Tensor::scalar(value), Op::Fused { input, local_grad }, tracked))
    }

    /// Reverse sweep from the scalar `loss`; afterwards [`Graph::grad`] holds
    /// d loss / d node for every tracked node (zeros where unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(shape));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].as_deref() else { continue };
            let g = g.to_vec();
            self.propagate(i, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let grad = if node.tracked {
                Some(g.unwrap_or_else(|| vec![0.0; node.value.numel()]))
            } else {
                None
            };
            node.value.set_grad(grad)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let tracked = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if tracked(*a) {
                    let bt = transpose_raw(tb.data(), k, n);
                    accumulate(grads, *a, matmul_raw(g, &bt, m, n, k));
                }
                if tracked(*b) {
                    let at = transpose_raw(ta.data(), m, k);
                    accumulate(grads, *b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::AddRowBias(x, bias) => {
                if tracked(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if tracked(*bias) {
                    let cols = out.cols();
                    let mut gb = vec![0.0; cols];
                    for (j, v) in g.iter().enumerate() {
                        gb[j % cols] += v;
                    }
                    accumulate(grads, *bias, gb);
                }
            }
            Op::Add(a, b) => {
                if tracked(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if tracked(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if tracked(*a) {
                    accumulate(grads, *a, g.iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                }
                if tracked(*b) {
                    accumulate(grads, *b, g.iter().zip(ta.data()).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, k) => {
                accumulate(grads, *a, g.iter().map(|v| v * k).collect());
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let contrib = g
                    .iter()
                    .zip(ta.data())
                    .map(|(g, &x)| g * gelu_derivative(x))
                    .collect();
                accumulate(grads, *a, contrib);
            }
            Op::Sigmoid(a) => {
                let contrib = g
                    .iter()
                    .zip(out.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                accumulate(grads, *a, contrib);
            }
            Op::SoftmaxRows(a) => {
                let cols = out.cols();
                let mut contrib = vec![0.0; g.len()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        contrib[r * cols + c] = y[c] * (gr[c] - dot);
                    }
                }
                accumulate(grads, *a, contrib);
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let cols = out.cols();
                let rows = out.rows();
                let tg = self.value(*gain).data();
                if tracked(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let n = cols as f64;
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xh = &normalized[r * cols..(r + 1) * cols];
                        let dxh: Vec<f64> = gr.iter().zip(tg).map(|(a, b)| a * b).collect();
                        let sum_dxh: f64 = dxh.iter().sum();
                        let sum_dxh_xh: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            dx[r * cols + c] =
                                inv_std[r] / n * (n * dxh[c] - sum_dxh - xh[c] * sum_dxh_xh);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if tracked(*gain) {
                    let mut dg = vec![0.0; cols];
                    for (j, (gv, xh)) in g.iter().zip(normalized).enumerate() {
                        dg[j % cols] += gv * xh;
                    }
                    accumulate(grads, *gain, dg);
                }
                if tracked(*bias) {
                    let mut db = vec![0.0; cols];
                    for (j, gv) in g.iter().enumerate() {
                        db[j % cols] += gv;
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if tracked(p) {
                        accumulate(grads, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::SliceRows(x, from) => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let mut contrib = vec![0.0; tx.numel()];
                contrib[from * cols..from * cols + g.len()].copy_from_slice(g);
                accumulate(grads, *x, contrib);
            }
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if tracked(p) {
                        let mut contrib = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            contrib.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, p, contrib);
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, from) => {
                let tx = self.value(*x);
                let (rows, cols) = (tx.rows(), tx.cols());
                let w = out.cols();
                let mut contrib = vec![0.0; tx.numel()];
                for r in 0..rows {
                    contrib[r * cols + from..r * cols + from + w]
                        .copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                accumulate(grads, *x, contrib);
            }
            Op::Transpose(x) => {
                // out is cols×rows of x
                accumulate(grads, *x, transpose_raw(g, out.rows(), out.cols()));
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let cols = ta.cols();
                if tracked(*a) {
                    let contrib = (0..ta.numel()).map(|j| g[j / cols] * tb.data()[j]).collect();
                    accumulate(grads, *a, contrib);
                }
                if tracked(*b) {
                    let contrib = (0..tb.numel()).map(|j| g[j / cols] * ta.data()[j]).collect();
                    accumulate(grads, *b, contrib);
                }
            }
            Op::MeanRows(x) => {
                let tx = self.value(*x);
                let (rows, cols) = (tx.rows(), tx.cols());
                let contrib = (0..rows * cols).map(|j| g[j % cols] / rows as f64).collect();
                accumulate(grads, *x, contrib);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, g.to_vec());
            }
            Op::Fused { input, local_grad } => {
                accumulate(grads, *input, local_grad.iter().map(|l| l * g[0]).collect());
            }
        }
    }
}
