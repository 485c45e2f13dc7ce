//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records each operation as a node holding its output value and
//! whatever the backward rule needs. Nodes are appended in evaluation order,
//! so the node list is already topologically sorted; [`Tape::backward`]
//! walks it once in reverse. A tape lives for a single forward pass and is
//! consumed by `backward`.

use super::kernels::{self, Padding};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Softmax(Var),
    Modulus(Var, Var),
    Conv { x: Var, h: Var, pad: Padding },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Pool { x: Var, stride: usize },
    Upsample { x: Var, stride: usize },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Reshape(Var),
    StackRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Column(Var, usize),
    Select(Var, usize),
    Center(Var),
    Subsample(Var, usize),
    Square(Var),
    Ln(Var),
    PeriodicMean { x: Var, period: usize, skip: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`]. Only leaf gradients are kept.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zero-filled when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn cols_of(t: &Tensor) -> usize {
    if t.ndim() == 1 {
        1
    } else {
        t.cols()
    }
}

fn rows_of(t: &Tensor) -> usize {
    if t.ndim() == 1 {
        t.len()
    } else {
        t.rows()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op_name, ta.shape(), tb.shape()));
        }
        let out = ta.zip_map(tb, f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Sum of several same-shape tensors.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Contract("add_all of nothing".into()))?;
        let mut acc = *first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    fn check_row(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.ndim() != 1 || ta.cols() != tb.len() {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        Ok(())
    }

    /// `a + b` with the vector `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_row(a, b, "add_row")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = tb.len();
        let mut out = ta.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % n];
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    /// `a * b` elementwise with the vector `b` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_row(a, b, "mul_row")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = tb.len();
        let mut out = ta.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= tb.data()[i % n];
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MulRow(a, b), rg))
    }

    /// `a * s` for a single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(Error::dim("mul_scalar", self.value(a).shape(), ts.shape()));
        }
        let out = self.value(a).scale(ts.item());
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::MulScalar(a, s), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let mut out = ta.clone();
        let n = out.cols();
        for row in out.data_mut().chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Elementwise `sqrt(re^2 + im^2)`; the subgradient at the origin is 0.
    pub fn modulus(&mut self, re: Var, im: Var) -> Result<Var> {
        self.binary(re, im, "modulus", f64::hypot, Op::Modulus(re, im))
    }

    /// Length-preserving 1-D convolution, see [`kernels::convolve_same`].
    pub fn conv(&mut self, x: Var, h: Var, pad: Padding) -> Result<Var> {
        let (tx, th) = (self.value(x), self.value(h));
        if tx.ndim() != 1 || th.ndim() != 1 {
            return Err(Error::dim("conv", tx.shape(), th.shape()));
        }
        if th.len() > 2 * tx.len() {
            return Err(Error::Support(format!(
                "filter of length {} exceeds twice the signal length {}",
                th.len(),
                tx.len()
            )));
        }
        let out = Tensor::vector(kernels::convolve_same(tx.data(), th.data(), pad));
        let rg = self.rg(&[x, h]);
        Ok(self.push(out, Op::Conv { x, h, pad }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// Mean over the first axis of a matrix: `[T x D] -> [D]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 2 {
            return Err(Error::dim("mean_rows", t.shape(), &[2]));
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a), rg))
    }

    /// Mean pooling over windows of `stride` rows; a trailing partial window
    /// is averaged over its actual length.
    pub fn pool(&mut self, x: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Contract("pool stride must be >= 1".into()));
        }
        let t = self.value(x);
        let (rows, cols) = (rows_of(t), cols_of(t));
        let pooled = kernels::pooled_len(rows, stride);
        let mut out = vec![0.0; pooled * cols];
        for i in 0..pooled {
            let lo = i * stride;
            let hi = ((i + 1) * stride).min(rows);
            let inv = 1.0 / (hi - lo) as f64;
            for r in lo..hi {
                for c in 0..cols {
                    out[i * cols + c] += t.data()[r * cols + c] * inv;
                }
            }
        }
        let shape = if t.ndim() == 1 {
            vec![pooled]
        } else {
            vec![pooled, cols]
        };
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Pool { x, stride }, rg))
    }

    /// Center-aligned linear interpolation from a stride-`stride` pooled
    /// sequence back to `len` rows.
    pub fn upsample(&mut self, x: Var, len: usize, stride: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (rows_of(t), cols_of(t));
        if len < rows {
            return Err(Error::Contract(format!(
                "upsample target length {len} is shorter than input length {rows}"
            )));
        }
        let mut out = vec![0.0; len * cols];
        for step in 0..len {
            let (i0, i1, w0, w1) = kernels::upsample_stencil(step, stride, rows);
            for c in 0..cols {
                out[step * cols + c] = w0 * t.data()[i0 * cols + c] + w1 * t.data()[i1 * cols + c];
            }
        }
        let shape = if t.ndim() == 1 { vec![len] } else { vec![len, cols] };
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Upsample { x, stride }, rg))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let n = t.cols();
        let mut out = t.clone();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LayerNorm { x, inv_std }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, vars: &[Var]) -> Result<Var> {
        let first = vars
            .first()
            .ok_or_else(|| Error::Contract("stack_rows of nothing".into()))?;
        let n = self.value(*first).len();
        let mut data = Vec::with_capacity(n * vars.len());
        for v in vars {
            let t = self.value(*v);
            if t.len() != n {
                return Err(Error::dim("stack_rows", self.value(*first).shape(), t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(vars);
        Ok(self.push(
            Tensor::new(vec![vars.len(), n], data)?,
            Op::StackRows(vars.to_vec()),
            rg,
        ))
    }

    /// Concatenates along columns; 1-D inputs count as single columns.
    pub fn concat_cols(&mut self, vars: &[Var]) -> Result<Var> {
        let first = vars
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = rows_of(self.value(*first));
        let widths: Vec<usize> = vars.iter().map(|v| cols_of(self.value(*v))).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (v, &w) in vars.iter().zip(&widths) {
            let t = self.value(*v);
            if rows_of(t) != rows {
                return Err(Error::dim("concat_cols", self.value(*first).shape(), t.shape()));
            }
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w].copy_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = self.rg(vars);
        Ok(self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(vars.to_vec()), rg))
    }

    /// Column `c` of a matrix as a vector.
    pub fn column(&mut self, a: Var, c: usize) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 2 || c >= t.cols() {
            return Err(Error::dim("column", t.shape(), &[c]));
        }
        let out = t.column(c);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Column(a, c), rg))
    }

    /// Element `i` of the flattened tensor as a single-element tensor.
    pub fn select(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if i >= t.len() {
            return Err(Error::dim("select", t.shape(), &[i]));
        }
        let out = Tensor::scalar(t.data()[i]);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Select(a, i), rg))
    }

    /// Subtracts the mean over all entries.
    pub fn center(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mean = t.sum() / t.len() as f64;
        let out = t.map(|v| v - mean);
        let rg = self.rg(&[a]);
        self.push(out, Op::Center(a), rg)
    }

    /// Keeps every `stride`-th entry of a vector.
    pub fn subsample(&mut self, a: Var, stride: usize) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 1 || stride == 0 {
            return Err(Error::dim("subsample", t.shape(), &[stride]));
        }
        let out = Tensor::vector(t.data().iter().step_by(stride).copied().collect());
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Subsample(a, stride), rg))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        let rg = self.rg(&[a]);
        self.push(out, Op::Square(a), rg)
    }

    /// Natural logarithm; inputs must be positive.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("ln of a non-positive value".into()));
        }
        let out = t.map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Ln(a), rg))
    }

    /// Row `r` of a matrix as a vector.
    pub fn select_row(&mut self, a: Var, r: usize) -> Var {
        let t = self.transpose(a).expect("select_row needs a matrix");
        self.column(t, r).expect("row index out of range")
    }

    /// Per-column periodic pattern: entry `t` becomes the mean of the rows
    /// sharing phase `t mod period`, minus the average of those phase means.
    /// The means use only rows `skip..rows - skip`.
    pub fn periodic_mean(&mut self, x: Var, period: usize, skip: usize) -> Result<Var> {
        let t = self.value(x);
        let out = periodic_mean_forward(t, period, skip)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::PeriodicMean { x, period, skip }, rg))
    }

    /// Reverse pass from a single-element `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let n_loss = self.value(loss).len();
        if n_loss != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let nodes = self.nodes;
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut acc = |v: Var, grad: Tensor| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            let wants = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.scale(-1.0));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        acc(*a, g.zip_map(val(*b), |x, y| x * y)?);
                    }
                    if wants(*b) {
                        acc(*b, g.zip_map(val(*a), |x, y| x * y)?);
                    }
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s)),
                Op::AddRow(a, b) => {
                    if wants(*b) {
                        let n = val(*b).len();
                        let mut gb = vec![0.0; n];
                        for (i, v) in g.data().iter().enumerate() {
                            gb[i % n] += v;
                        }
                        acc(*b, Tensor::vector(gb));
                    }
                    acc(*a, g);
                }
                Op::MulRow(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let n = tb.len();
                    if wants(*b) {
                        let mut gb = vec![0.0; n];
                        for (i, (gv, av)) in g.data().iter().zip(ta.data()).enumerate() {
                            gb[i % n] += gv * av;
                        }
                        acc(*b, Tensor::vector(gb));
                    }
                    if wants(*a) {
                        let mut ga = g;
                        for (i, v) in ga.data_mut().iter_mut().enumerate() {
                            *v *= tb.data()[i % n];
                        }
                        acc(*a, ga);
                    }
                }
                Op::MulScalar(a, s) => {
                    if wants(*s) {
                        let gs: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                        acc(*s, Tensor::scalar(gs));
                    }
                    if wants(*a) {
                        acc(*a, g.scale(val(*s).item()));
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if wants(*a) {
                        // ga[i,p] = sum_j g[i,j] b[p,j]
                        let mut ga = vec![0.0; m * k];
                        for i in 0..m {
                            let grow = &g.data()[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &tb.data()[p * n..(p + 1) * n];
                                ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        acc(*a, Tensor::new(vec![m, k], ga)?);
                    }
                    if wants(*b) {
                        // gb = a^T g
                        let at = ta.transpose()?;
                        let mut gb = vec![0.0; k * n];
                        super::tensor::matmul_into(at.data(), g.data(), &mut gb, k, m, n);
                        acc(*b, Tensor::new(vec![k, n], gb)?);
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()?),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(*a, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv))?);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    let mut ga = g.clone();
                    for ((grow, yrow), out) in g
                        .data()
                        .chunks(n)
                        .zip(y.data().chunks(n))
                        .zip(ga.data_mut().chunks_mut(n))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for j in 0..n {
                            out[j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    acc(*a, ga);
                }
                Op::Modulus(re, im) => {
                    let y = &node.value;
                    let ratio = |num: &Tensor| {
                        let mut out = g.clone();
                        for ((o, &nv), &yv) in out.data_mut().iter_mut().zip(num.data()).zip(y.data()) {
                            *o = if yv > 0.0 { *o * nv / yv } else { 0.0 };
                        }
                        out
                    };
                    if wants(*re) {
                        acc(*re, ratio(val(*re)));
                    }
                    if wants(*im) {
                        acc(*im, ratio(val(*im)));
                    }
                }
                Op::Conv { x, h, pad } => {
                    let (tx, th) = (val(*x), val(*h));
                    if wants(*h) {
                        let gh = kernels::convolve_same_grad_filter(g.data(), tx.data(), th.len(), *pad);
                        acc(*h, Tensor::vector(gh));
                    }
                    if wants(*x) {
                        let gx = kernels::convolve_same_grad_input(g.data(), th.data(), *pad);
                        acc(*x, Tensor::vector(gx));
                    }
                }
                Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
                Op::Mean(a) => {
                    let t = val(*a);
                    acc(*a, Tensor::full(t.shape(), g.item() / t.len() as f64));
                }
                Op::MeanRows(a) => {
                    let t = val(*a);
                    let rows = t.rows() as f64;
                    let mut ga = Tensor::zeros(t.shape());
                    let n = t.cols();
                    for (i, v) in ga.data_mut().iter_mut().enumerate() {
                        *v = g.data()[i % n] / rows;
                    }
                    acc(*a, ga);
                }
                Op::Pool { x, stride } => {
                    let t = val(*x);
                    let (rows, cols) = (rows_of(t), cols_of(t));
                    let mut gx = Tensor::zeros(t.shape());
                    for r in 0..rows {
                        let i = r / stride;
                        let len = ((i + 1) * stride).min(rows) - i * stride;
                        for c in 0..cols {
                            gx.data_mut()[r * cols + c] = g.data()[i * cols + c] / len as f64;
                        }
                    }
                    acc(*x, gx);
                }
                Op::Upsample { x, stride } => {
                    let t = val(*x);
                    let (rows, cols) = (rows_of(t), cols_of(t));
                    let len = rows_of(&g);
                    let mut gx = Tensor::zeros(t.shape());
                    for step in 0..len {
                        let (i0, i1, w0, w1) = kernels::upsample_stencil(step, *stride, rows);
                        for c in 0..cols {
                            let gv = g.data()[step * cols + c];
                            gx.data_mut()[i0 * cols + c] += w0 * gv;
                            gx.data_mut()[i1 * cols + c] += w1 * gv;
                        }
                    }
                    acc(*x, gx);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let n = y.cols();
                    let mut gx = g.clone();
                    for (r, ((grow, yrow), out)) in g
                        .data()
                        .chunks(n)
                        .zip(y.data().chunks(n))
                        .zip(gx.data_mut().chunks_mut(n))
                        .enumerate()
                    {
                        let mean_g = grow.iter().sum::<f64>() / n as f64;
                        let mean_gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            out[j] = inv_std[r] * (grow[j] - mean_g - yrow[j] * mean_gy);
                        }
                    }
                    acc(*x, gx);
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    acc(*a, g.reshape(&shape)?);
                }
                Op::StackRows(vars) => {
                    let n = g.cols();
                    for (r, v) in vars.iter().enumerate() {
                        if wants(*v) {
                            let shape = val(*v).shape().to_vec();
                            let row = Tensor::new(shape, g.data()[r * n..(r + 1) * n].to_vec())?;
                            acc(*v, row);
                        }
                    }
                }
                Op::ConcatCols(vars) => {
                    let total = g.cols();
                    let rows = g.rows();
                    let mut offset = 0;
                    for v in vars {
                        let t = val(*v);
                        let w = cols_of(t);
                        if wants(*v) {
                            let mut part = vec![0.0; rows * w];
                            for r in 0..rows {
                                part[r * w..(r + 1) * w]
                                    .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                            }
                            acc(*v, Tensor::new(t.shape().to_vec(), part)?);
                        }
                        offset += w;
                    }
                }
                Op::Column(a, c) => {
                    let t = val(*a);
                    let cols = t.cols();
                    let mut ga = Tensor::zeros(t.shape());
                    for (r, v) in g.data().iter().enumerate() {
                        ga.data_mut()[r * cols + c] = *v;
                    }
                    acc(*a, ga);
                }
                Op::Select(a, i) => {
                    let mut ga = Tensor::zeros(val(*a).shape());
                    ga.data_mut()[*i] = g.item();
                    acc(*a, ga);
                }
                Op::Center(a) => {
                    let mean = g.sum() / g.len() as f64;
                    acc(*a, g.map(|v| v - mean));
                }
                Op::Subsample(a, stride) => {
                    let mut ga = Tensor::zeros(val(*a).shape());
                    for (i, v) in g.data().iter().enumerate() {
                        ga.data_mut()[i * stride] = *v;
                    }
                    acc(*a, ga);
                }
                Op::Square(a) => acc(*a, g.zip_map(val(*a), |gv, av| 2.0 * gv * av)?),
                Op::Ln(a) => acc(*a, g.zip_map(val(*a), |gv, av| gv / av)?),
                Op::PeriodicMean { x, period, skip } => {
                    acc(*x, periodic_mean_adjoint(&g, *period, *skip));
                }
            }
        }

        Ok(Gradients { grads, shapes })
    }
}

fn periodic_mean_forward(t: &Tensor, period: usize, skip: usize) -> Result<Tensor> {
    let (rows, cols) = (rows_of(t), cols_of(t));
    if period == 0 || period + 2 * skip > rows {
        return Err(Error::Contract(format!(
            "period {period} with {skip} skipped rows per edge out of range for {rows} rows"
        )));
    }
    let mut out = Tensor::zeros(t.shape());
    for c in 0..cols {
        let mut sums = vec![0.0; period];
        let mut counts = vec![0usize; period];
        for r in skip..rows - skip {
            sums[r % period] += t.data()[r * cols + c];
            counts[r % period] += 1;
        }
        let means: Vec<f64> = sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect();
        let grand = means.iter().sum::<f64>() / period as f64;
        for r in 0..rows {
            out.data_mut()[r * cols + c] = means[r % period] - grand;
        }
    }
    Ok(out)
}

fn periodic_mean_adjoint(g: &Tensor, period: usize, skip: usize) -> Tensor {
    let (rows, cols) = (rows_of(g), cols_of(g));
    let mut out = Tensor::zeros(g.shape());
    let mut counts = vec![0usize; period];
    for r in skip..rows - skip {
        counts[r % period] += 1;
    }
    for c in 0..cols {
        let mut phase = vec![0.0; period];
        let mut total = 0.0;
        for r in 0..rows {
            let v = g.data()[r * cols + c];
            phase[r % period] += v;
            total += v;
        }
        for r in skip..rows - skip {
            let k = r % period;
            out.data_mut()[r * cols + c] = (phase[k] - total / period as f64) / counts[k] as f64;
        }
    }
    out
}

/// Tape-free version of [`Tape::periodic_mean`].
pub fn periodic_mean(t: &Tensor, period: usize, skip: usize) -> Result<Tensor> {
    periodic_mean_forward(t, period, skip)
}
