//! Reverse-mode automatic differentiation over the tensor op set.
//!
//! Forward values are computed eagerly and recorded on an append-only tape;
//! `backward` walks the tape in reverse and accumulates per-op adjoints.
//! Gradient accumulation sums over all uses of a value, which is what the
//! shared K/Q projection requires.
//!
//! A tape is single-threaded; independent tapes may run concurrently.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, GELU_A, GELU_C};
use std::sync::Arc;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddColVec(Var, Var),
    ScaleRows(Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    Swish(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    RsqrtEps(Var, f64),
    MeanCols(Var),
    MeanRows(Var),
    SumAll(Var),
    DwConv1d(Var, Var),
    DwConv2d { x: Var, kernel: Var, gh: usize, gw: usize },
    FlipRows(Var),
    SliceRows { x: Var, start: usize, len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Gather { x: Var, map: Arc<Vec<usize>> },
    CrossEntropy { logits: Var, label: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only record of operations with gradient slots aligned to nodes.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Leaves with `requires_grad = false` are constants and
    /// receive no gradient.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // -- recording ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.val(a).matmul(self.val(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), value, needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.val(a).transpose()?;
        let needs = self.needs(a);
        Ok(self.push(Op::Transpose(a), value, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.val(a).add(self.val(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.val(a).sub(self.val(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.val(a).mul(self.val(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.val(a).scale(c);
        let needs = self.needs(a);
        Ok(self.push(Op::Scale(a, c), value, needs))
    }

    /// Scales a tensor by a recorded scalar (shape `[1]`) value.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.val(s).len() != 1 {
            return Err(Error::Shape("scale_by: scalar operand must have len 1".into()));
        }
        let c = self.val(s).data()[0];
        let value = self.val(a).scale(c);
        let needs = self.needs(a) || self.needs(s);
        Ok(self.push(Op::ScaleBy(a, s), value, needs))
    }

    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let value = self.val(a).add_row(self.val(v))?;
        let needs = self.needs(a) || self.needs(v);
        Ok(self.push(Op::AddRow(a, v), value, needs))
    }

    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let value = self.val(a).mul_row(self.val(v))?;
        let needs = self.needs(a) || self.needs(v);
        Ok(self.push(Op::MulRow(a, v), value, needs))
    }

    pub fn add_col_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let value = self.val(a).add_col_vec(self.val(v))?;
        let needs = self.needs(a) || self.needs(v);
        Ok(self.push(Op::AddColVec(a, v), value, needs))
    }

    pub fn scale_rows(&mut self, a: Var, v: Var) -> Result<Var> {
        let value = self.val(a).scale_rows(self.val(v))?;
        let needs = self.needs(a) || self.needs(v);
        Ok(self.push(Op::ScaleRows(a, v), value, needs))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.val(a).sigmoid();
        let needs = self.needs(a);
        Ok(self.push(Op::Sigmoid(a), value, needs))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.val(a).gelu();
        let needs = self.needs(a);
        Ok(self.push(Op::Gelu(a), value, needs))
    }

    pub fn swish(&mut self, a: Var) -> Result<Var> {
        let value = self.val(a).swish();
        let needs = self.needs(a);
        Ok(self.push(Op::Swish(a), value, needs))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let value = self.val(x).layer_norm(self.val(gamma), self.val(beta), eps)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, value, needs))
    }

    pub fn rsqrt_eps(&mut self, a: Var, eps: f64) -> Result<Var> {
        let value = self.val(a).rsqrt_eps(eps);
        let needs = self.needs(a);
        Ok(self.push(Op::RsqrtEps(a, eps), value, needs))
    }

    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let value = self.val(a).mean_cols()?;
        let needs = self.needs(a);
        Ok(self.push(Op::MeanCols(a), value, needs))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.val(a).mean_rows()?;
        let needs = self.needs(a);
        Ok(self.push(Op::MeanRows(a), value, needs))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let value = self.val(a).sum_all();
        let needs = self.needs(a);
        Ok(self.push(Op::SumAll(a), value, needs))
    }

    pub fn dwconv1d_causal(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let value = self.val(x).dwconv1d_causal(self.val(kernel))?;
        let needs = self.needs(x) || self.needs(kernel);
        Ok(self.push(Op::DwConv1d(x, kernel), value, needs))
    }

    pub fn dwconv2d(&mut self, x: Var, gh: usize, gw: usize, kernel: Var) -> Result<Var> {
        let value = self.val(x).dwconv2d(gh, gw, self.val(kernel))?;
        let needs = self.needs(x) || self.needs(kernel);
        Ok(self.push(Op::DwConv2d { x, kernel, gh, gw }, value, needs))
    }

    pub fn flip_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.val(a).flip_rows()?;
        let needs = self.needs(a);
        Ok(self.push(Op::FlipRows(a), value, needs))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.val(x).slice_rows(start, len)?;
        let needs = self.needs(x);
        Ok(self.push(Op::SliceRows { x, start, len }, value, needs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.val(x).slice_cols(start, len)?;
        let needs = self.needs(x);
        Ok(self.push(Op::SliceCols { x, start, len }, value, needs))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| self.val(*v)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        let needs = parts.iter().any(|v| self.needs(*v));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| self.val(*v)).collect();
        let value = Tensor::concat_cols(&tensors)?;
        let needs = parts.iter().any(|v| self.needs(*v));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.val(a).reshape(shape)?;
        let needs = self.needs(a);
        Ok(self.push(Op::Reshape(a), value, needs))
    }

    pub fn gather(&mut self, x: Var, shape: &[usize], map: Arc<Vec<usize>>) -> Result<Var> {
        let value = self.val(x).gather(shape, &map)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Gather { x, map }, value, needs))
    }

    /// Numerically-stable softmax cross entropy of a `[1 x K]` (or `[K]`)
    /// logit row against an integer label; returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let value = cross_entropy_value(self.val(logits), label)?;
        let needs = self.needs(logits);
        Ok(self.push(Op::CrossEntropy { logits, label }, value, needs))
    }

    // -- backward ------------------------------------------------------------

    /// Runs reverse accumulation from a scalar loss. Calling this twice on
    /// one tape is an error, not silent accumulation.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape(
                "backward() already ran on this tape; record a fresh tape".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape("loss is not a value on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), 1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the loss w.r.t. `v` (zeros when the loss does not depend
    /// on it). Valid only after `backward`.
    pub fn grad(&self, v: Var) -> Result<Tensor> {
        if !self.backward_done {
            return Err(Error::Tape("grad() before backward()".into()));
        }
        Ok(match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        })
    }

    fn acc(&mut self, v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                debug_assert_eq!(g.len(), delta.len());
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            None => {
                // keep the grad shaped like the node value
                let mut init = Tensor::zeros(self.nodes[v.0].value.shape());
                for (a, b) in init.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
                *slot = Some(init);
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) -> Result<()> {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let da = g.matmul(&self.val(b).transpose()?)?;
                let db = self.val(a).transpose()?.matmul(g)?;
                self.acc(a, da);
                self.acc(b, db);
            }
            Op::Transpose(a) => {
                self.acc(a, g.transpose()?);
            }
            Op::Add(a, b) => {
                self.acc(a, g.clone());
                self.acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(a, g.clone());
                self.acc(b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let da = g.mul(self.val(b))?;
                let db = g.mul(self.val(a))?;
                self.acc(a, da);
                self.acc(b, db);
            }
            Op::Scale(a, c) => {
                self.acc(a, g.scale(c));
            }
            Op::ScaleBy(a, s) => {
                let c = self.val(s).data()[0];
                let da = g.scale(c);
                let ds = g.mul(self.val(a))?.sum_all();
                self.acc(a, da);
                self.acc(s, ds);
            }
            Op::AddRow(a, v) => {
                self.acc(a, g.clone());
                let dv = col_sums(g)?;
                self.acc(v, dv);
            }
            Op::MulRow(a, v) => {
                let da = g.mul_row(self.val(v))?;
                let dv = col_sums(&g.mul(self.val(a))?)?;
                self.acc(a, da);
                self.acc(v, dv);
            }
            Op::AddColVec(a, v) => {
                self.acc(a, g.clone());
                let dv = row_sums(g)?;
                self.acc(v, dv);
            }
            Op::ScaleRows(a, v) => {
                let da = g.scale_rows(self.val(v))?;
                let dv = row_sums(&g.mul(self.val(a))?)?;
                self.acc(a, da);
                self.acc(v, dv);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let mut dx = g.clone();
                for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d *= s * (1.0 - s);
                }
                self.acc(a, dx);
            }
            Op::Gelu(a) => {
                let x = self.val(a);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    let u = GELU_C * (v + GELU_A * v * v * v);
                    let th = u.tanh();
                    let deriv =
                        0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *d *= deriv;
                }
                self.acc(a, dx);
            }
            Op::Swish(a) => {
                let x = self.val(a);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    let s = 1.0 / (1.0 + (-v).exp());
                    *d *= s * (1.0 + v * (1.0 - s));
                }
                self.acc(a, dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (dx, dgamma, dbeta) =
                    layer_norm_backward(self.val(x), self.val(gamma), eps, g)?;
                self.acc(x, dx);
                self.acc(gamma, dgamma);
                self.acc(beta, dbeta);
            }
            Op::RsqrtEps(a, eps) => {
                let x = self.val(a);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    let y = 1.0 / (v + eps).sqrt();
                    *d *= -0.5 * y * y * y;
                }
                self.acc(a, dx);
            }
            Op::MeanCols(a) => {
                let (rows, cols) = self.val(a).dims2()?;
                let mut dx = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    let gr = g.data()[r] / cols as f64;
                    for c in 0..cols {
                        dx.data_mut()[r * cols + c] = gr;
                    }
                }
                self.acc(a, dx);
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.val(a).dims2()?;
                let mut dx = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    for c in 0..cols {
                        dx.data_mut()[r * cols + c] = g.data()[c] / rows as f64;
                    }
                }
                self.acc(a, dx);
            }
            Op::SumAll(a) => {
                let dx = Tensor::filled(self.val(a).shape(), g.data()[0]);
                self.acc(a, dx);
            }
            Op::DwConv1d(x, kernel) => {
                let (dx, dk) = dwconv1d_backward(self.val(x), self.val(kernel), g)?;
                self.acc(x, dx);
                self.acc(kernel, dk);
            }
            Op::DwConv2d { x, kernel, gh, gw } => {
                let (dx, dk) = dwconv2d_backward(self.val(x), self.val(kernel), gh, gw, g)?;
                self.acc(x, dx);
                self.acc(kernel, dk);
            }
            Op::FlipRows(a) => {
                self.acc(a, g.flip_rows()?);
            }
            Op::SliceRows { x, start, len } => {
                let (rows, cols) = self.val(x).dims2()?;
                let mut dx = Tensor::zeros(&[rows, cols]);
                dx.data_mut()[start * cols..(start + len) * cols].copy_from_slice(g.data());
                self.acc(x, dx);
            }
            Op::SliceCols { x, start, len } => {
                let (rows, cols) = self.val(x).dims2()?;
                let mut dx = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    for c in 0..len {
                        dx.data_mut()[r * cols + start + c] = g.data()[r * len + c];
                    }
                }
                self.acc(x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, _) = self.val(p).dims2()?;
                    let dp = g.slice_rows(offset, r)?;
                    offset += r;
                    self.acc(p, dp);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (_, c) = self.val(p).dims2()?;
                    let dp = g.slice_cols(offset, c)?;
                    offset += c;
                    self.acc(p, dp);
                }
            }
            Op::Reshape(a) => {
                let dx = g.reshape(self.val(a).shape())?;
                self.acc(a, dx);
            }
            Op::Gather { x, map } => {
                let mut dx = Tensor::zeros(self.val(x).shape());
                for (i, &src) in map.iter().enumerate() {
                    dx.data_mut()[src] += g.data()[i];
                }
                self.acc(x, dx);
            }
            Op::CrossEntropy { logits, label } => {
                let z = self.val(logits);
                let probs = softmax_row(z);
                let mut dz = Tensor::zeros(z.shape());
                let g0 = g.data()[0];
                for (c, p) in probs.iter().enumerate() {
                    let onehot = if c == label { 1.0 } else { 0.0 };
                    dz.data_mut()[c] = (p - onehot) * g0;
                }
                self.acc(logits, dz);
            }
        }
        Ok(())
    }

    /// Recomputes every node's value from the leaves, in recorded order.
    /// The result must be bit-identical to the stored values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = |var: &Var| &vals[var.0];
            let out = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Matmul(a, b) => v(a).matmul(v(b))?,
                Op::Transpose(a) => v(a).transpose()?,
                Op::Add(a, b) => v(a).add(v(b))?,
                Op::Sub(a, b) => v(a).sub(v(b))?,
                Op::Mul(a, b) => v(a).mul(v(b))?,
                Op::Scale(a, c) => v(a).scale(*c),
                Op::ScaleBy(a, s) => v(a).scale(v(s).data()[0]),
                Op::AddRow(a, r) => v(a).add_row(v(r))?,
                Op::MulRow(a, r) => v(a).mul_row(v(r))?,
                Op::AddColVec(a, r) => v(a).add_col_vec(v(r))?,
                Op::ScaleRows(a, r) => v(a).scale_rows(v(r))?,
                Op::Sigmoid(a) => v(a).sigmoid(),
                Op::Gelu(a) => v(a).gelu(),
                Op::Swish(a) => v(a).swish(),
                Op::LayerNorm { x, gamma, beta, eps } => {
                    v(x).layer_norm(v(gamma), v(beta), *eps)?
                }
                Op::RsqrtEps(a, eps) => v(a).rsqrt_eps(*eps),
                Op::MeanCols(a) => v(a).mean_cols()?,
                Op::MeanRows(a) => v(a).mean_rows()?,
                Op::SumAll(a) => v(a).sum_all(),
                Op::DwConv1d(x, k) => v(x).dwconv1d_causal(v(k))?,
                Op::DwConv2d { x, kernel, gh, gw } => v(x).dwconv2d(*gh, *gw, v(kernel))?,
                Op::FlipRows(a) => v(a).flip_rows()?,
                Op::SliceRows { x, start, len } => v(x).slice_rows(*start, *len)?,
                Op::SliceCols { x, start, len } => v(x).slice_cols(*start, *len)?,
                Op::ConcatRows(parts) => {
                    let ts: Vec<&Tensor> = parts.iter().map(|p| &vals[p.0]).collect();
                    Tensor::concat_rows(&ts)?
                }
                Op::ConcatCols(parts) => {
                    let ts: Vec<&Tensor> = parts.iter().map(|p| &vals[p.0]).collect();
                    Tensor::concat_cols(&ts)?
                }
                Op::Reshape(a) => v(a).reshape(node.value.shape())?,
                Op::Gather { x, map } => v(x).gather(node.value.shape(), map)?,
                Op::CrossEntropy { logits, label } => cross_entropy_value(v(logits), *label)?,
            };
            vals.push(out);
        }
        Ok(vals)
    }

    pub fn values_equal_replay(&self) -> Result<bool> {
        let replayed = self.replay()?;
        Ok(self
            .nodes
            .iter()
            .zip(replayed.iter())
            .all(|(n, r)| n.value == *r))
    }
}

fn cross_entropy_value(logits: &Tensor, label: usize) -> Result<Tensor> {
    let k = logits.len();
    if label >= k {
        return Err(Error::Config(format!("label {label} out of {k} classes")));
    }
    let z = logits.data();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(Tensor::scalar(lse - z[label]))
}

fn softmax_row(logits: &Tensor) -> Vec<f64> {
    let z = logits.data();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn col_sums(g: &Tensor) -> Result<Tensor> {
    let (rows, cols) = g.dims2()?;
    let mut out = Tensor::zeros(&[cols]);
    for r in 0..rows {
        for c in 0..cols {
            out.data_mut()[c] += g.data()[r * cols + c];
        }
    }
    Ok(out)
}

fn row_sums(g: &Tensor) -> Result<Tensor> {
    let (rows, cols) = g.dims2()?;
    let mut out = Tensor::zeros(&[rows]);
    for r in 0..rows {
        for c in 0..cols {
            out.data_mut()[r] += g.data()[r * cols + c];
        }
    }
    Ok(out)
}

/// Analytic layer-norm adjoint, matching the forward's eps.
fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    eps: f64,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (rows, cols) = x.dims2()?;
    let mut dx = Tensor::zeros(&[rows, cols]);
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(gamma.shape());
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let grow = &g.data()[r * cols..(r + 1) * cols];
        let mean: f64 = row.iter().sum::<f64>() / cols as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv_std = 1.0 / (var + eps).sqrt();

        let mut m1 = 0.0; // mean of gamma * g
        let mut m2 = 0.0; // mean of gamma * g * xhat
        let mut xhat = vec![0.0; cols];
        for c in 0..cols {
            xhat[c] = (row[c] - mean) * inv_std;
            let gx = gamma.data()[c] * grow[c];
            m1 += gx;
            m2 += gx * xhat[c];
            dgamma.data_mut()[c] += grow[c] * xhat[c];
            dbeta.data_mut()[c] += grow[c];
        }
        m1 /= cols as f64;
        m2 /= cols as f64;
        for c in 0..cols {
            let gx = gamma.data()[c] * grow[c];
            dx.data_mut()[r * cols + c] = (gx - m1 - xhat[c] * m2) * inv_std;
        }
    }
    Ok((dx, dgamma, dbeta))
}

fn dwconv1d_backward(x: &Tensor, kernel: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (t_len, ch) = x.dims2()?;
    let (k_len, _) = kernel.dims2()?;
    let mut dx = Tensor::zeros(&[t_len, ch]);
    let mut dk = Tensor::zeros(&[k_len, ch]);
    for t in 0..t_len {
        for tap in 0..k_len {
            let back = k_len - 1 - tap;
            if back > t {
                continue;
            }
            let s = t - back;
            for c in 0..ch {
                dx.data_mut()[s * ch + c] += kernel.data()[tap * ch + c] * g.data()[t * ch + c];
                dk.data_mut()[tap * ch + c] += g.data()[t * ch + c] * x.data()[s * ch + c];
            }
        }
    }
    Ok((dx, dk))
}

fn dwconv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    gh: usize,
    gw: usize,
    g: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (_, ch) = x.dims2()?;
    let k = kernel.shape()[0];
    let pad = (k - 1) / 2;
    let mut dx = Tensor::zeros(x.shape());
    let mut dk = Tensor::zeros(kernel.shape());
    for i in 0..gh {
        for j in 0..gw {
            for a in 0..k {
                let ii = i + a;
                if ii < pad || ii - pad >= gh {
                    continue;
                }
                let si = ii - pad;
                for b in 0..k {
                    let jj = j + b;
                    if jj < pad || jj - pad >= gw {
                        continue;
                    }
                    let sj = jj - pad;
                    let src = (si * gw + sj) * ch;
                    let dst = (i * gw + j) * ch;
                    let ker = (a * k + b) * ch;
                    for c in 0..ch {
                        dx.data_mut()[src + c] += kernel.data()[ker + c] * g.data()[dst + c];
                        dk.data_mut()[ker + c] += g.data()[dst + c] * x.data()[src + c];
                    }
                }
            }
        }
    }
    Ok((dx, dk))
}

/// Central finite differences of a scalar function of flat tensor inputs.
/// Test harness utility: rebuilds the function at `x += h` and `x -= h` per
/// coordinate.
pub fn finite_difference<F>(inputs: &[Tensor], f: F, h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        let mut grad = Tensor::zeros(x.shape());
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            grad.data_mut()[j] = (f(&plus)? - f(&minus)?) / (2.0 * h);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Compares an autodiff gradient against finite differences, relatively, on
/// coordinates where the gradient is informative.
pub fn max_rel_grad_dev(auto: &Tensor, fd: &Tensor, min_mag: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, b) in auto.data().iter().zip(fd.data()) {
        if a.abs() > min_mag || b.abs() > min_mag {
            let denom = a.abs().max(b.abs()).max(min_mag);
            worst = worst.max((a - b).abs() / denom);
        }
    }
    worst
}

impl<S: Scalar> crate::tensor::TensorOf<S> {
    /// Frobenius norm.
    pub fn frob_norm(&self) -> f64 {
        self.data()
            .iter()
            .map(|v| {
                let x = v.to_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recorded_matmul_equals_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let plain = a.matmul(&b).unwrap();
        let mut tape = Tape::new();
        let va = tape.leaf(a, true);
        let vb = tape.leaf(b, true);
        let before = tape.len();
        let vc = tape.matmul(va, vb).unwrap();
        assert_eq!(tape.len(), before + 1);
        assert_eq!(tape.value(vc), &plain);
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(&[4, 4], 1.0, &mut rng), true);
        let g = tape.leaf(Tensor::randn(&[4], 1.0, &mut rng), true);
        let b = tape.leaf(Tensor::randn(&[4], 1.0, &mut rng), true);
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let s = tape.sigmoid(y).unwrap();
        let m = tape.matmul(s, x).unwrap();
        let _ = tape.sum_all(m).unwrap();
        assert!(tape.values_equal_replay().unwrap());
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[3, 2], 2.5), true);
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), Tensor::filled(&[3, 2], 1.0));
    }

    #[test]
    fn grad_of_square_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data()[0], 6.0);
    }

    #[test]
    fn unused_input_gets_exact_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        let unused = tape.leaf(Tensor::filled(&[2, 2], 5.0), true);
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Tape(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[2, 2], 1.0), true);
        assert!(matches!(tape.backward(x), Err(Error::Tape(_))));
    }

    /// Builds a scalar probe `sum(out * w)` for a given op and gradchecks
    /// every input against central finite differences.
    fn gradcheck_op<F>(name: &str, inputs: &[Tensor], build: F, tol: f64)
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
        // probe weights fixed across FD evaluations
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars).unwrap();
        let w = Tensor::randn(tape.value(out).shape(), 1.0, &mut rng);

        let wv = tape.leaf(w.clone(), false);
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        let auto: Vec<Tensor> = vars.iter().map(|v| tape.grad(*v).unwrap()).collect();

        let fd = finite_difference(inputs, |xs| {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), false)).collect();
            let o = build(&mut t, &vs)?;
            let wv = t.leaf(w.clone(), false);
            let p = t.mul(o, wv)?;
            let s = t.sum_all(p)?;
            Ok(t.value(s).data()[0])
        }, 1e-5)
        .unwrap();

        for (i, (a, f)) in auto.iter().zip(fd.iter()).enumerate() {
            let dev = max_rel_grad_dev(a, f, 1e-7);
            assert!(dev < tol, "{name} input {i}: rel dev {dev}");
        }
    }

    #[test]
    fn primitive_gradchecks_hold_over_seeds() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
            let b = Tensor::randn(&[4, 3], 1.0, &mut rng);
            let c = Tensor::randn(&[3, 4], 1.0, &mut rng);
            let v4 = Tensor::randn(&[4], 1.0, &mut rng);
            let v3 = Tensor::randn(&[3], 1.0, &mut rng);
            let s1 = Tensor::randn(&[1], 1.0, &mut rng);
            let k1 = Tensor::randn(&[3, 4], 0.5, &mut rng);
            let k2 = Tensor::randn(&[3, 3, 4], 0.5, &mut rng);
            let pos = Tensor::from_f64_slice(
                &[3],
                &[
                    rng.gen_range(0.5..2.0),
                    rng.gen_range(0.5..2.0),
                    rng.gen_range(0.5..2.0),
                ],
            )
            .unwrap();

            gradcheck_op("matmul", &[a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]), 1e-5);
            gradcheck_op("add", &[a.clone(), c.clone()], |t, v| t.add(v[0], v[1]), 1e-5);
            gradcheck_op("sub", &[a.clone(), c.clone()], |t, v| t.sub(v[0], v[1]), 1e-5);
            gradcheck_op("mul", &[a.clone(), c.clone()], |t, v| t.mul(v[0], v[1]), 1e-5);
            gradcheck_op("scale", std::slice::from_ref(&a), |t, v| t.scale(v[0], -1.75), 1e-5);
            gradcheck_op(
                "scale_by",
                &[a.clone(), s1.clone()],
                |t, v| t.scale_by(v[0], v[1]),
                1e-5,
            );
            gradcheck_op("transpose", std::slice::from_ref(&a), |t, v| t.transpose(v[0]), 1e-5);
            gradcheck_op(
                "add_row",
                &[a.clone(), v4.clone()],
                |t, v| t.add_row(v[0], v[1]),
                1e-5,
            );
            gradcheck_op(
                "mul_row",
                &[a.clone(), v4.clone()],
                |t, v| t.mul_row(v[0], v[1]),
                1e-5,
            );
            gradcheck_op(
                "add_col_vec",
                &[a.clone(), v3.clone()],
                |t, v| t.add_col_vec(v[0], v[1]),
                1e-5,
            );
            gradcheck_op(
                "scale_rows",
                &[a.clone(), v3.clone()],
                |t, v| t.scale_rows(v[0], v[1]),
                1e-5,
            );
            gradcheck_op("sigmoid", std::slice::from_ref(&a), |t, v| t.sigmoid(v[0]), 1e-4);
            gradcheck_op("gelu", std::slice::from_ref(&a), |t, v| t.gelu(v[0]), 1e-4);
            gradcheck_op("swish", std::slice::from_ref(&a), |t, v| t.swish(v[0]), 1e-4);
            gradcheck_op(
                "layer_norm",
                &[a.clone(), v4.clone(), v4.clone()],
                |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
                1e-4,
            );
            gradcheck_op("rsqrt_eps", std::slice::from_ref(&pos), |t, v| t.rsqrt_eps(v[0], 1e-3), 1e-4);
            gradcheck_op("mean_cols", std::slice::from_ref(&a), |t, v| t.mean_cols(v[0]), 1e-5);
            gradcheck_op("mean_rows", std::slice::from_ref(&a), |t, v| t.mean_rows(v[0]), 1e-5);
            gradcheck_op(
                "dwconv1d",
                &[a.clone(), k1.clone()],
                |t, v| t.dwconv1d_causal(v[0], v[1]),
                1e-4,
            );
            gradcheck_op(
                "dwconv2d",
                &[Tensor::randn(&[12, 4], 1.0, &mut rng), k2.clone()],
                |t, v| t.dwconv2d(v[0], 3, 4, v[1]),
                1e-4,
            );
            gradcheck_op("flip_rows", std::slice::from_ref(&a), |t, v| t.flip_rows(v[0]), 1e-5);
            gradcheck_op(
                "slice_rows",
                std::slice::from_ref(&a),
                |t, v| t.slice_rows(v[0], 1, 2),
                1e-5,
            );
            gradcheck_op(
                "slice_cols",
                std::slice::from_ref(&a),
                |t, v| t.slice_cols(v[0], 1, 2),
                1e-5,
            );
            gradcheck_op("concat_rows", &[a.clone(), c.clone()], |t, v| t.concat_rows(v), 1e-5);
            gradcheck_op("concat_cols", &[a.clone(), c.clone()], |t, v| t.concat_cols(v), 1e-5);
            gradcheck_op("reshape", std::slice::from_ref(&a), |t, v| t.reshape(v[0], &[4, 3]), 1e-5);
            gradcheck_op(
                "gather",
                std::slice::from_ref(&a),
                |t, v| {
                    let map = Arc::new(vec![11, 0, 5, 3, 7, 2]);
                    t.gather(v[0], &[2, 3], map)
                },
                1e-5,
            );
            gradcheck_op(
                "cross_entropy",
                &[Tensor::randn(&[1, 5], 1.0, &mut rng)],
                |t, v| t.cross_entropy(v[0], 2),
                1e-4,
            );
        }
    }
}
