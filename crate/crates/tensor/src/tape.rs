//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output value, so a node's inputs
//! always precede it. [`Tape::backward`] walks the nodes once, newest first,
//! and accumulates vector-Jacobian products into the inputs that need them.
//! A tape is meant to live for a single training step.

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    BatchMean(Var),
    BatchStd { x: Var, eps: f64 },
    SubRows(Var, Var),
    DivRows(Var, Var),
    LogSoftmax(Var),
    Reshape(Var),
    MeanPool { x: Var, spatial: usize },
    NarrowRows(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::BatchMean(_) => "batch_mean",
            Op::BatchStd { .. } => "batch_std",
            Op::SubRows(..) => "sub_rows",
            Op::DivRows(..) => "div_rows",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Reshape(_) => "reshape",
            Op::MeanPool { .. } => "mean_pool",
            Op::NarrowRows(_) => "narrow_rows",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Affine { x, w, b } | Op::Conv2d { x, w, b, .. } => vec![x, w, b],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::SubRows(a, b)
            | Op::DivRows(a, b) => vec![a, b],
            Op::Transpose(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Scale(a, _)
            | Op::BatchMean(a)
            | Op::LogSoftmax(a)
            | Op::Reshape(a)
            | Op::NarrowRows(a)
            | Op::BatchStd { x: a, .. }
            | Op::MeanPool { x: a, .. } => vec![a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records forward ops for one differentiation pass.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which no leaf requires a gradient; used for inference.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient (inputs, masks, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Inputs of the op that produced `v`.
    pub fn op_inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(v.0))
        }
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.check(v)?;
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(TensorError::invalid(op, format!("expected rank-2 input, got {s:?}"))),
        }
    }

    /// `x[B,in] · w[out,in]ᵀ + b[out]`
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (batch, inp) = self.dims2("affine", x)?;
        let (out, w_in) = self.dims2("affine", w)?;
        self.check(b)?;
        if w_in != inp {
            return Err(TensorError::mismatch("affine", self.shape(x), self.shape(w)));
        }
        if self.shape(b) != [out] {
            return Err(TensorError::mismatch("affine", self.shape(w), self.shape(b)));
        }
        let y = kernels::affine(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            batch,
            inp,
            out,
        );
        Ok(self.record(Tensor::from_raw(vec![batch, out], y), Op::Affine { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let c = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.record(Tensor::from_raw(vec![m, n], c), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.record(Tensor::from_raw(vec![n, m], out), Op::Transpose(a)))
    }

    /// 2-D convolution of `x[B,C,H,W]` with `w[O,C,KH,KW]` plus `b[O]`,
    /// zero padding on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be at least 1"));
        }
        let (xs, ws) = (self.shape(x), self.shape(w));
        let ([batch, in_ch, height, width], [out_ch, w_ch, kh, kw]) = (xs, ws) else {
            return Err(TensorError::mismatch("conv2d", xs, ws));
        };
        let (batch, in_ch, height, width) = (*batch, *in_ch, *height, *width);
        let (out_ch, w_ch, kh, kw) = (*out_ch, *w_ch, *kh, *kw);
        if w_ch != in_ch || height + 2 * pad < kh || width + 2 * pad < kw {
            return Err(TensorError::mismatch("conv2d", xs, ws));
        }
        if self.shape(b) != [out_ch] {
            return Err(TensorError::mismatch("conv2d", ws, self.shape(b)));
        }
        let geom = ConvGeom {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kh,
            kw,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        };
        let y = kernels::conv2d(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom);
        let shape = vec![batch, out_ch, geom.out_h, geom.out_w];
        Ok(self.record(Tensor::from_raw(shape, y), Op::Conv2d { x, w, b, geom }))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        Ok(self.record(Tensor::from_raw(shape, data), op))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, factor), |v| v * factor)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a).reshape(shape)?;
        Ok(self.record(t, Op::Reshape(a)))
    }

    /// `[B, ...] -> [B, prod(...)]`
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a);
        if shape.is_empty() {
            return Err(TensorError::invalid("flatten", "cannot flatten a scalar"));
        }
        let rows = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(a, &[rows, rest])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data().iter().sum();
        Ok(self.record(Tensor::scalar(s), Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.record(Tensor::scalar(s), Op::Mean(a)))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let name = op.name();
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        Ok(self.record(Tensor::from_raw(shape, data), op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Per-column mean over the batch axis: `[B,D] -> [D]`.
    pub fn batch_mean(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("batch_mean", a)?;
        let data = self.value(a).data();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        Ok(self.record(Tensor::from_raw(vec![cols], out), Op::BatchMean(a)))
    }

    /// Per-column population standard deviation over the batch axis,
    /// floored at `eps` so it can be used as a divisor.
    pub fn batch_std(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims2("batch_std", a)?;
        if eps <= 0.0 {
            return Err(TensorError::invalid("batch_std", "eps must be positive"));
        }
        let (_, var) = column_moments(self.value(a).data(), rows, cols);
        let out = var.iter().map(|v| v.sqrt().max(eps)).collect();
        Ok(self.record(Tensor::from_raw(vec![cols], out), Op::BatchStd { x: a, eps }))
    }

    fn row_broadcast(&mut self, a: Var, r: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let name = op.name();
        let (rows, cols) = self.dims2(name, a)?;
        self.check(r)?;
        if self.shape(r) != [cols] {
            return Err(TensorError::mismatch(name, self.shape(a), self.shape(r)));
        }
        let (ta, tr) = (self.value(a).data(), self.value(r).data());
        let mut out = Vec::with_capacity(rows * cols);
        for row in 0..rows {
            out.extend(ta[row * cols..(row + 1) * cols].iter().zip(tr).map(|(&x, &y)| f(x, y)));
        }
        Ok(self.record(Tensor::from_raw(vec![rows, cols], out), op))
    }

    /// `a[B,D] - r[D]` for every row.
    pub fn sub_rows(&mut self, a: Var, r: Var) -> Result<Var> {
        self.row_broadcast(a, r, Op::SubRows(a, r), |x, y| x - y)
    }

    /// `a[B,D] / r[D]` for every row; `r` must be nonzero.
    pub fn div_rows(&mut self, a: Var, r: Var) -> Result<Var> {
        self.row_broadcast(a, r, Op::DivRows(a, r), |x, y| x / y)
    }

    /// Numerically stable log-softmax along the last axis of `[B,N]`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("log_softmax", a)?;
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        Ok(self.record(Tensor::from_raw(vec![rows, cols], out), Op::LogSoftmax(a)))
    }

    /// Global average over the spatial axes: `[B,C,H,W] -> [B,C]`.
    pub fn mean_pool(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let &[b, c, h, w] = self.shape(a) else {
            return Err(TensorError::invalid(
                "mean_pool",
                format!("expected [B,C,H,W], got {:?}", self.shape(a)),
            ));
        };
        let spatial = h * w;
        let out = self
            .value(a)
            .data()
            .chunks(spatial)
            .map(|ch| ch.iter().sum::<f64>() / spatial as f64)
            .collect();
        Ok(self.record(Tensor::from_raw(vec![b, c], out), Op::MeanPool { x: a, spatial }))
    }

    /// First `n` entries along the leading axis.
    pub fn narrow_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        if t.rank() == 0 || n == 0 || n > t.shape()[0] {
            return Err(TensorError::invalid(
                "narrow_rows",
                format!("cannot take {n} rows of {:?}", t.shape()),
            ));
        }
        let width = t.numel() / t.shape()[0];
        let mut shape = t.shape().to_vec();
        shape[0] = n;
        let data = t.data()[..n * width].to_vec();
        Ok(self.record(Tensor::from_raw(shape, data), Op::NarrowRows(a)))
    }

    /// Computes `∂loss/∂leaf` for every leaf that requires a gradient.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let loss_shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            backward_node(&nodes, &mut grads, node, &dy);
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::from_raw(node.value.shape().to_vec(), dy));
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Per-column mean and population variance of a row-major `[rows, cols]` block.
fn column_moments(data: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for (m, v) in mean.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for ((s, v), m) in var.iter_mut().zip(&data[r * cols..(r + 1) * cols]).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= rows as f64);
    (mean, var)
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn backward_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, dy: &[f64]) {
    let val = |v: Var| nodes[v.0].value.data();
    match node.op {
        Op::Leaf => {}
        Op::Affine { x, w, b } => {
            let (batch, inp) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
            let out = nodes[w.0].value.shape()[0];
            if let Some(dx) = slot(nodes, grads, x) {
                let wd = val(w);
                for bi in 0..batch {
                    let row = &mut dx[bi * inp..(bi + 1) * inp];
                    for o in 0..out {
                        let g = dy[bi * out + o];
                        if g != 0.0 {
                            kernels::axpy(g, &wd[o * inp..(o + 1) * inp], row);
                        }
                    }
                }
            }
            if let Some(dw) = slot(nodes, grads, w) {
                let xd = val(x);
                for o in 0..out {
                    let row = &mut dw[o * inp..(o + 1) * inp];
                    for bi in 0..batch {
                        let g = dy[bi * out + o];
                        if g != 0.0 {
                            kernels::axpy(g, &xd[bi * inp..(bi + 1) * inp], row);
                        }
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for bi in 0..batch {
                    for o in 0..out {
                        db[o] += dy[bi * out + o];
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[1];
            if let Some(da) = slot(nodes, grads, a) {
                let bd = val(b);
                for i in 0..m {
                    for p in 0..k {
                        da[i * k + p] += kernels::dot(&dy[i * n..(i + 1) * n], &bd[p * n..(p + 1) * n]);
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                let ad = val(a);
                for i in 0..m {
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        if aip != 0.0 {
                            kernels::axpy(aip, &dy[i * n..(i + 1) * n], &mut db[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            if let Some(da) = slot(nodes, grads, a) {
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += dy[j * m + i];
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let (xd, wd) = (val(x), val(w));
            // Distinct vars, so taking the three slots in turn is enough.
            let mut dx = slot(nodes, grads, x).map(std::mem::take);
            let mut dw = slot(nodes, grads, w).map(std::mem::take);
            let mut db = slot(nodes, grads, b).map(std::mem::take);
            kernels::conv2d_backward(
                xd,
                wd,
                dy,
                &geom,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            for (v, g) in [(x, dx), (w, dw), (b, db)] {
                if let Some(g) = g {
                    grads[v.0] = Some(g);
                }
            }
        }
        Op::Relu(a) => {
            let ad = val(a);
            if let Some(da) = slot(nodes, grads, a) {
                for ((d, &g), &x) in da.iter_mut().zip(dy).zip(ad) {
                    if x > 0.0 {
                        *d += g;
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(da) = slot(nodes, grads, a) {
                da.iter_mut().for_each(|d| *d += dy[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(da) = slot(nodes, grads, a) {
                let g = dy[0] / da.len() as f64;
                da.iter_mut().for_each(|d| *d += g);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(dv) = slot(nodes, grads, v) {
                    kernels::axpy(1.0, dy, dv);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = slot(nodes, grads, a) {
                kernels::axpy(1.0, dy, da);
            }
            if let Some(db) = slot(nodes, grads, b) {
                kernels::axpy(-1.0, dy, db);
            }
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(a), val(b));
            if let Some(da) = slot(nodes, grads, a) {
                for ((d, g), y) in da.iter_mut().zip(dy).zip(bd) {
                    *d += g * y;
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for ((d, g), x) in db.iter_mut().zip(dy).zip(ad) {
                    *d += g * x;
                }
            }
        }
        Op::Scale(a, factor) => {
            if let Some(da) = slot(nodes, grads, a) {
                kernels::axpy(factor, dy, da);
            }
        }
        Op::BatchMean(a) => {
            let rows = nodes[a.0].value.shape()[0];
            if let Some(da) = slot(nodes, grads, a) {
                for row in da.chunks_mut(dy.len()) {
                    kernels::axpy(1.0 / rows as f64, dy, row);
                }
            }
        }
        Op::BatchStd { x, eps } => {
            let (rows, cols) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
            let xd = val(x);
            let (mean, var) = column_moments(xd, rows, cols);
            if let Some(dx) = slot(nodes, grads, x) {
                for j in 0..cols {
                    let std = var[j].sqrt();
                    // Below the floor the output is the constant eps.
                    if std <= eps {
                        continue;
                    }
                    let coef = dy[j] / (rows as f64 * std);
                    for r in 0..rows {
                        dx[r * cols + j] += coef * (xd[r * cols + j] - mean[j]);
                    }
                }
            }
        }
        Op::SubRows(a, r) => {
            if let Some(da) = slot(nodes, grads, a) {
                kernels::axpy(1.0, dy, da);
            }
            if let Some(dr) = slot(nodes, grads, r) {
                let cols = dr.len();
                for row in dy.chunks(cols) {
                    kernels::axpy(-1.0, row, dr);
                }
            }
        }
        Op::DivRows(a, r) => {
            let (ad, rd) = (val(a), val(r));
            let cols = rd.len();
            if let Some(da) = slot(nodes, grads, a) {
                for (drow, grow) in da.chunks_mut(cols).zip(dy.chunks(cols)) {
                    for ((d, g), den) in drow.iter_mut().zip(grow).zip(rd) {
                        *d += g / den;
                    }
                }
            }
            if let Some(dr) = slot(nodes, grads, r) {
                for (arow, grow) in ad.chunks(cols).zip(dy.chunks(cols)) {
                    for j in 0..cols {
                        dr[j] -= grow[j] * arow[j] / (rd[j] * rd[j]);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let cols = node.value.shape()[1];
            let yd = node.value.data();
            if let Some(da) = slot(nodes, grads, a) {
                for ((drow, grow), yrow) in da.chunks_mut(cols).zip(dy.chunks(cols)).zip(yd.chunks(cols)) {
                    let total: f64 = grow.iter().sum();
                    for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += g - y.exp() * total;
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(da) = slot(nodes, grads, a) {
                kernels::axpy(1.0, dy, da);
            }
        }
        Op::MeanPool { x, spatial } => {
            if let Some(dx) = slot(nodes, grads, x) {
                for (chunk, g) in dx.chunks_mut(spatial).zip(dy) {
                    let share = g / spatial as f64;
                    chunk.iter_mut().for_each(|d| *d += share);
                }
            }
        }
        Op::NarrowRows(a) => {
            if let Some(da) = slot(nodes, grads, a) {
                kernels::axpy(1.0, dy, &mut da[..dy.len()]);
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` is not a trainable leaf reachable
    /// from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
