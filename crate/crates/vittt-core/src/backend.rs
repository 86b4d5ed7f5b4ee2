//! Execution backends for the model forward.
//!
//! The forward passes (TTT scan, Vittt block, backbone) are written once,
//! generic over [`Backend`]. [`Eval`] runs them as plain tensor kernels;
//! [`Tape`](crate::autodiff::Tape) records them for reverse-mode
//! differentiation. Both paths therefore compute bit-identical forward
//! values.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor, TensorOf};
use std::marker::PhantomData;
use std::sync::Arc;

pub trait Backend {
    type Elem: Scalar;
    type Value: Clone;

    /// Binds a learnable parameter (master copy kept in f64).
    fn parameter(&mut self, t: &Tensor) -> Self::Value;
    /// Binds a non-learnable constant.
    fn constant(&mut self, t: TensorOf<Self::Elem>) -> Self::Value;
    fn peek<'a>(&'a self, v: &'a Self::Value) -> &'a TensorOf<Self::Elem>;

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn transpose(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, a: &Self::Value, c: f64) -> Result<Self::Value>;
    fn scale_by(&mut self, a: &Self::Value, s: &Self::Value) -> Result<Self::Value>;
    fn add_row(&mut self, a: &Self::Value, v: &Self::Value) -> Result<Self::Value>;
    fn mul_row(&mut self, a: &Self::Value, v: &Self::Value) -> Result<Self::Value>;
    fn add_col_vec(&mut self, a: &Self::Value, v: &Self::Value) -> Result<Self::Value>;
    fn scale_rows(&mut self, a: &Self::Value, v: &Self::Value) -> Result<Self::Value>;
    fn sigmoid(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn gelu(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn swish(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn layer_norm(
        &mut self,
        x: &Self::Value,
        gamma: &Self::Value,
        beta: &Self::Value,
        eps: f64,
    ) -> Result<Self::Value>;
    fn rsqrt_eps(&mut self, a: &Self::Value, eps: f64) -> Result<Self::Value>;
    fn mean_cols(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn mean_rows(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn sum_all(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn dwconv1d_causal(&mut self, x: &Self::Value, kernel: &Self::Value) -> Result<Self::Value>;
    fn dwconv2d(
        &mut self,
        x: &Self::Value,
        gh: usize,
        gw: usize,
        kernel: &Self::Value,
    ) -> Result<Self::Value>;
    fn flip_rows(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn slice_rows(&mut self, a: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    fn slice_cols(&mut self, a: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    fn concat_rows(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn concat_cols(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn reshape(&mut self, a: &Self::Value, shape: &[usize]) -> Result<Self::Value>;
    fn gather(
        &mut self,
        a: &Self::Value,
        shape: &[usize],
        map: Arc<Vec<usize>>,
    ) -> Result<Self::Value>;
    fn cross_entropy(&mut self, logits: &Self::Value, label: usize) -> Result<Self::Value>;
}

/// Plain eager evaluation, generic over element precision.
pub struct Eval<S: Scalar = f64> {
    _marker: PhantomData<S>,
}

impl<S: Scalar> Eval<S> {
    pub fn new() -> Self {
        Eval {
            _marker: PhantomData,
        }
    }
}

impl<S: Scalar> Default for Eval<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Backend for Eval<S> {
    type Elem = S;
    type Value = TensorOf<S>;

    fn parameter(&mut self, t: &Tensor) -> Self::Value {
        t.cast()
    }

    fn constant(&mut self, t: TensorOf<S>) -> Self::Value {
        t
    }

    fn peek<'a>(&'a self, v: &'a Self::Value) -> &'a TensorOf<S> {
        v
    }

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        a.matmul(b)
    }

    fn transpose(&mut self, a: &Self::Value) -> Result<Self::Value> {
        a.transpose()
    }

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        a.add(b)
    }

    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        a.sub(b)
    }

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        a.mul(b)
    }

    fn scale(&mut self, a: &Self::Value, c: f64) -> Result<Self::Value> {
        Ok(a.scale(c))
    }

    fn scale_by(&mut self, a: &Self::Value, s: &Self::Value) -> Result<Self::Value> {
        Ok(a.scale(s.data()[0].to_f64()))
    }

    fn add_row(&mut self, a: &Self::Value, v: &Self::Value) -> Result<Self::Value> {
        a.add_row(v)
    }

    fn mul_row(&mut self, a: &Self::Value, v: &Self::Value) -> Result<Self::Value> {
        a.mul_row(v)
    }

    fn add_col_vec(&mut self, a: &Self::Value, v: &Self::Value) -> Result<Self::Value> {
        a.add_col_vec(v)
    }

    fn scale_rows(&mut self, a: &Self::Value, v: &Self::Value) -> Result<Self::Value> {
        a.scale_rows(v)
    }

    fn sigmoid(&mut self, a: &Self::Value) -> Result<Self::Value> {
        Ok(a.sigmoid())
    }

    fn gelu(&mut self, a: &Self::Value) -> Result<Self::Value> {
        Ok(a.gelu())
    }

    fn swish(&mut self, a: &Self::Value) -> Result<Self::Value> {
        Ok(a.swish())
    }

    fn layer_norm(
        &mut self,
        x: &Self::Value,
        gamma: &Self::Value,
        beta: &Self::Value,
        eps: f64,
    ) -> Result<Self::Value> {
        x.layer_norm(gamma, beta, eps)
    }

    fn rsqrt_eps(&mut self, a: &Self::Value, eps: f64) -> Result<Self::Value> {
        Ok(a.rsqrt_eps(eps))
    }

    fn mean_cols(&mut self, a: &Self::Value) -> Result<Self::Value> {
        a.mean_cols()
    }

    fn mean_rows(&mut self, a: &Self::Value) -> Result<Self::Value> {
        a.mean_rows()
    }

    fn sum_all(&mut self, a: &Self::Value) -> Result<Self::Value> {
        Ok(a.sum_all())
    }

    fn dwconv1d_causal(&mut self, x: &Self::Value, kernel: &Self::Value) -> Result<Self::Value> {
        x.dwconv1d_causal(kernel)
    }

    fn dwconv2d(
        &mut self,
        x: &Self::Value,
        gh: usize,
        gw: usize,
        kernel: &Self::Value,
    ) -> Result<Self::Value> {
        x.dwconv2d(gh, gw, kernel)
    }

    fn flip_rows(&mut self, a: &Self::Value) -> Result<Self::Value> {
        a.flip_rows()
    }

    fn slice_rows(&mut self, a: &Self::Value, start: usize, len: usize) -> Result<Self::Value> {
        a.slice_rows(start, len)
    }

    fn slice_cols(&mut self, a: &Self::Value, start: usize, len: usize) -> Result<Self::Value> {
        a.slice_cols(start, len)
    }

    fn concat_rows(&mut self, parts: &[Self::Value]) -> Result<Self::Value> {
        let refs: Vec<&TensorOf<S>> = parts.iter().collect();
        TensorOf::concat_rows(&refs)
    }

    fn concat_cols(&mut self, parts: &[Self::Value]) -> Result<Self::Value> {
        let refs: Vec<&TensorOf<S>> = parts.iter().collect();
        TensorOf::concat_cols(&refs)
    }

    fn reshape(&mut self, a: &Self::Value, shape: &[usize]) -> Result<Self::Value> {
        a.reshape(shape)
    }

    fn gather(
        &mut self,
        a: &Self::Value,
        shape: &[usize],
        map: Arc<Vec<usize>>,
    ) -> Result<Self::Value> {
        a.gather(shape, &map)
    }

    fn cross_entropy(&mut self, logits: &Self::Value, label: usize) -> Result<Self::Value> {
        // stable log-sum-exp in f64 regardless of element type
        let z = logits.to_f64_vec();
        if label >= z.len() {
            return Err(crate::error::Error::Config(format!(
                "label {label} out of {} classes",
                z.len()
            )));
        }
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        Ok(TensorOf::scalar(lse - z[label]))
    }
}

impl Backend for Tape {
    type Elem = f64;
    type Value = Var;

    fn parameter(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone(), true)
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn peek<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.value(*v)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::matmul(self, *a, *b)
    }

    fn transpose(&mut self, a: &Var) -> Result<Var> {
        Tape::transpose(self, *a)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::add(self, *a, *b)
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::sub(self, *a, *b)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::mul(self, *a, *b)
    }

    fn scale(&mut self, a: &Var, c: f64) -> Result<Var> {
        Tape::scale(self, *a, c)
    }

    fn scale_by(&mut self, a: &Var, s: &Var) -> Result<Var> {
        Tape::scale_by(self, *a, *s)
    }

    fn add_row(&mut self, a: &Var, v: &Var) -> Result<Var> {
        Tape::add_row(self, *a, *v)
    }

    fn mul_row(&mut self, a: &Var, v: &Var) -> Result<Var> {
        Tape::mul_row(self, *a, *v)
    }

    fn add_col_vec(&mut self, a: &Var, v: &Var) -> Result<Var> {
        Tape::add_col_vec(self, *a, *v)
    }

    fn scale_rows(&mut self, a: &Var, v: &Var) -> Result<Var> {
        Tape::scale_rows(self, *a, *v)
    }

    fn sigmoid(&mut self, a: &Var) -> Result<Var> {
        Tape::sigmoid(self, *a)
    }

    fn gelu(&mut self, a: &Var) -> Result<Var> {
        Tape::gelu(self, *a)
    }

    fn swish(&mut self, a: &Var) -> Result<Var> {
        Tape::swish(self, *a)
    }

    fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        Tape::layer_norm(self, *x, *gamma, *beta, eps)
    }

    fn rsqrt_eps(&mut self, a: &Var, eps: f64) -> Result<Var> {
        Tape::rsqrt_eps(self, *a, eps)
    }

    fn mean_cols(&mut self, a: &Var) -> Result<Var> {
        Tape::mean_cols(self, *a)
    }

    fn mean_rows(&mut self, a: &Var) -> Result<Var> {
        Tape::mean_rows(self, *a)
    }

    fn sum_all(&mut self, a: &Var) -> Result<Var> {
        Tape::sum_all(self, *a)
    }

    fn dwconv1d_causal(&mut self, x: &Var, kernel: &Var) -> Result<Var> {
        Tape::dwconv1d_causal(self, *x, *kernel)
    }

    fn dwconv2d(&mut self, x: &Var, gh: usize, gw: usize, kernel: &Var) -> Result<Var> {
        Tape::dwconv2d(self, *x, gh, gw, *kernel)
    }

    fn flip_rows(&mut self, a: &Var) -> Result<Var> {
        Tape::flip_rows(self, *a)
    }

    fn slice_rows(&mut self, a: &Var, start: usize, len: usize) -> Result<Var> {
        Tape::slice_rows(self, *a, start, len)
    }

    fn slice_cols(&mut self, a: &Var, start: usize, len: usize) -> Result<Var> {
        Tape::slice_cols(self, *a, start, len)
    }

    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        Tape::concat_rows(self, parts)
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        Tape::concat_cols(self, parts)
    }

    fn reshape(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        Tape::reshape(self, *a, shape)
    }

    fn gather(&mut self, a: &Var, shape: &[usize], map: Arc<Vec<usize>>) -> Result<Var> {
        Tape::gather(self, *a, shape, map)
    }

    fn cross_entropy(&mut self, logits: &Var, label: usize) -> Result<Var> {
        Tape::cross_entropy(self, *logits, label)
    }
}
