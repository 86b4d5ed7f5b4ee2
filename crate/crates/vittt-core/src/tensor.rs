//! Minimal dense-tensor kernel set.
//!
//! Row-major flat storage; for `[T x D]` layouts the sequence axis is always
//! the second-to-last axis. Double precision is the default element type
//! (`Tensor = TensorOf<f64>`); single precision exists as an opt-in run mode
//! for throughput benchmarks.
//!
//! Matrix and convolution kernels feed the global multiply-accumulate
//! counter in [`macs`] when counting is enabled. Elementwise kernels do not.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

// ---------------------------------------------------------------------------
// scalar element types
// ---------------------------------------------------------------------------

/// Element type of a tensor: `f64` (default) or `f32` (benchmark mode).
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

// ---------------------------------------------------------------------------
// multiply-accumulate counter
// ---------------------------------------------------------------------------

/// Multiply-accumulate counter fed by the matmul and convolution kernels.
/// Elementwise ops are excluded so the counts line up with the
/// per-mechanism complexity formulas.
///
/// Counts are kept per thread: kernels add to the calling thread's counter,
/// which makes concurrent measurement regions independent. Benchmark runs
/// execute their kernels on one thread, so their totals are complete.
pub mod macs {
    use std::cell::Cell;

    thread_local! {
        static ENABLED: Cell<bool> = const { Cell::new(false) };
        static TOTAL: Cell<u64> = const { Cell::new(0) };
    }

    pub fn set_enabled(on: bool) {
        ENABLED.with(|e| e.set(on));
    }

    pub fn enabled() -> bool {
        ENABLED.with(|e| e.get())
    }

    pub fn reset() {
        TOTAL.with(|t| t.set(0));
    }

    pub fn total() -> u64 {
        TOTAL.with(|t| t.get())
    }

    #[inline]
    pub(crate) fn add(n: u64) {
        ENABLED.with(|e| {
            if e.get() {
                TOTAL.with(|t| t.set(t.get() + n));
            }
        });
    }

    /// Runs `f` with counting enabled on this thread and returns its MAC
    /// count alongside the result.
    pub fn counted<T>(f: impl FnOnce() -> T) -> (T, u64) {
        let was = enabled();
        let before = total();
        set_enabled(true);
        let out = f();
        let after = total();
        set_enabled(was);
        (out, after - before)
    }
}

// ---------------------------------------------------------------------------
// tensor type
// ---------------------------------------------------------------------------

/// Dense multi-dimensional array in row-major order.
///
/// Tensors are immutable values after construction as far as the kernels are
/// concerned: every kernel is a pure function returning a fresh tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorOf<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

/// Default double-precision tensor.
pub type Tensor = TensorOf<f64>;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> TensorOf<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        TensorOf {
            shape: shape.to_vec(),
            data: vec![S::ZERO; numel(shape)],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        TensorOf {
            shape: shape.to_vec(),
            data: vec![S::from_f64(v); numel(shape)],
        }
    }

    /// Builds a tensor from a flat row-major buffer, rejecting length
    /// mismatches and non-finite entries.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        let t = TensorOf {
            shape: shape.to_vec(),
            data,
        };
        t.ensure_finite("from_vec")?;
        Ok(t)
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn scalar(v: f64) -> Self {
        TensorOf {
            shape: vec![1],
            data: vec![S::from_f64(v)],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::ONE;
        }
        t
    }

    /// Lower-triangular mask of ones (diagonal included): the causal mask
    /// that keeps contributions from positions `s <= t`.
    pub fn tril_ones(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for r in 0..n {
            for c in 0..=r {
                t.data[r * n + c] = S::ONE;
            }
        }
        t
    }

    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and positive");
        TensorOf {
            shape: shape.to_vec(),
            data: (0..numel(shape))
                .map(|_| S::from_f64(dist.sample(rng)))
                .collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn cast<T: Scalar>(&self) -> TensorOf<T> {
        TensorOf {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    /// Rows/cols of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("expected 2-D tensor, got {other:?}"))),
        }
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(TensorOf {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )))
        }
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        Ok(self.zip(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        Ok(self.zip(other, |a, b| a - b))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "mul")?;
        Ok(self.zip(other, |a, b| a * b))
    }

    pub fn scale(&self, c: f64) -> Self {
        let c = S::from_f64(c);
        self.map(|v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Self {
        let c = S::from_f64(c);
        self.map(|v| v + c)
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid_scalar)
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&self) -> Self {
        self.map(gelu_scalar)
    }

    /// Swish / SiLU: `x * sigmoid(x)`.
    pub fn swish(&self) -> Self {
        self.map(|v| v * sigmoid_scalar(v))
    }

    fn map(&self, f: impl Fn(S) -> S) -> Self {
        TensorOf {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        TensorOf {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Reverses the sequence axis (rows of a 2-D `[T x D]` tensor).
    pub fn flip_rows(&self) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        let mut out = Self::zeros(&[rows, cols]);
        for r in 0..rows {
            let src = &self.data[r * cols..(r + 1) * cols];
            out.data[(rows - 1 - r) * cols..(rows - r) * cols].copy_from_slice(src);
        }
        Ok(out)
    }

    // -- matrix kernels ------------------------------------------------------

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dims {k} vs {k2} (shapes {:?} x {:?})",
                self.shape, other.shape
            )));
        }
        let mut out = vec![S::ZERO; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &aik) in arow.iter().enumerate() {
                let brow = &other.data[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        macs::add((m * k * n) as u64);
        Ok(TensorOf {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        let mut out = Self::zeros(&[cols, rows]);
        for r in 0..rows {
            for c in 0..cols {
                out.data[c * rows + r] = self.data[r * cols + c];
            }
        }
        Ok(out)
    }

    // -- row/col structured ops ----------------------------------------------

    /// Adds a length-`C` vector to every row of an `[R x C]` matrix.
    pub fn add_row(&self, v: &Self) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        if v.len() != cols {
            return Err(Error::Shape(format!(
                "add_row: vector len {} vs cols {cols}",
                v.len()
            )));
        }
        let mut out = self.clone();
        for r in 0..rows {
            for c in 0..cols {
                out.data[r * cols + c] += v.data[c];
            }
        }
        Ok(out)
    }

    /// Multiplies every row elementwise by a length-`C` vector.
    pub fn mul_row(&self, v: &Self) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        if v.len() != cols {
            return Err(Error::Shape(format!(
                "mul_row: vector len {} vs cols {cols}",
                v.len()
            )));
        }
        let mut out = self.clone();
        for r in 0..rows {
            for c in 0..cols {
                out.data[r * cols + c] *= v.data[c];
            }
        }
        Ok(out)
    }

    /// Adds a per-row scalar: `out[r, c] = self[r, c] + v[r]`.
    pub fn add_col_vec(&self, v: &Self) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        if v.len() != rows {
            return Err(Error::Shape(format!(
                "add_col_vec: vector len {} vs rows {rows}",
                v.len()
            )));
        }
        let mut out = self.clone();
        for r in 0..rows {
            let add = v.data[r];
            for c in 0..cols {
                out.data[r * cols + c] += add;
            }
        }
        Ok(out)
    }

    /// Scales each row by a per-row scalar: `out[r, c] = self[r, c] * v[r]`.
    pub fn scale_rows(&self, v: &Self) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        if v.len() != rows {
            return Err(Error::Shape(format!(
                "scale_rows: vector len {} vs rows {rows}",
                v.len()
            )));
        }
        let mut out = self.clone();
        for r in 0..rows {
            let s = v.data[r];
            for c in 0..cols {
                out.data[r * cols + c] *= s;
            }
        }
        Ok(out)
    }

    /// Per-row mean over the feature axis: `[R x C] -> [R]`.
    pub fn mean_cols(&self) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        if cols == 0 {
            return Err(Error::Shape("mean_cols: zero columns".into()));
        }
        let inv = S::from_f64(1.0 / cols as f64);
        let mut out = Self::zeros(&[rows]);
        for r in 0..rows {
            let mut acc = S::ZERO;
            for c in 0..cols {
                acc += self.data[r * cols + c];
            }
            out.data[r] = acc * inv;
        }
        Ok(out)
    }

    /// Mean over the sequence axis: `[R x C] -> [1 x C]`.
    pub fn mean_rows(&self) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        if rows == 0 {
            return Err(Error::Shape("mean_rows: zero rows".into()));
        }
        let inv = S::from_f64(1.0 / rows as f64);
        let mut out = Self::zeros(&[1, cols]);
        for r in 0..rows {
            for c in 0..cols {
                out.data[c] += self.data[r * cols + c];
            }
        }
        for c in 0..cols {
            out.data[c] *= inv;
        }
        Ok(out)
    }

    pub fn sum_all(&self) -> Self {
        let mut acc = S::ZERO;
        for &v in &self.data {
            acc += v;
        }
        TensorOf {
            shape: vec![1],
            data: vec![acc],
        }
    }

    /// Elementwise `1 / sqrt(x + eps)`.
    pub fn rsqrt_eps(&self, eps: f64) -> Self {
        let eps = S::from_f64(eps);
        self.map(|v| S::ONE / (v + eps).sqrt())
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        if start + len > rows {
            return Err(Error::Shape(format!(
                "slice_rows: {start}+{len} out of {rows} rows"
            )));
        }
        Ok(TensorOf {
            shape: vec![len, cols],
            data: self.data[start * cols..(start + len) * cols].to_vec(),
        })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        if start + len > cols {
            return Err(Error::Shape(format!(
                "slice_cols: {start}+{len} out of {cols} cols"
            )));
        }
        let mut out = Self::zeros(&[rows, len]);
        for r in 0..rows {
            out.data[r * len..(r + 1) * len]
                .copy_from_slice(&self.data[r * cols + start..r * cols + start + len]);
        }
        Ok(out)
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows: no inputs".into()));
        }
        let (_, cols) = parts[0].dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(Error::Shape(format!(
                    "concat_rows: column mismatch {c} vs {cols}"
                )));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Ok(TensorOf {
            shape: vec![rows, cols],
            data,
        })
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: no inputs".into()));
        }
        let (rows, _) = parts[0].dims2()?;
        let mut cols = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if r != rows {
                return Err(Error::Shape(format!(
                    "concat_cols: row mismatch {r} vs {rows}"
                )));
            }
            cols += c;
        }
        let mut out = Self::zeros(&[rows, cols]);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let pc = p.shape[1];
                out.data[r * cols + off..r * cols + off + pc]
                    .copy_from_slice(&p.data[r * pc..(r + 1) * pc]);
                off += pc;
            }
        }
        Ok(out)
    }

    /// Gathers flat elements through an index map: `out[i] = self.flat[map[i]]`.
    /// Used for patchification, which is a pure permutation of pixels.
    pub fn gather(&self, shape: &[usize], map: &[usize]) -> Result<Self> {
        if numel(shape) != map.len() {
            return Err(Error::Shape(format!(
                "gather: shape {:?} wants {} indices, map has {}",
                shape,
                numel(shape),
                map.len()
            )));
        }
        let mut data = Vec::with_capacity(map.len());
        for &src in map {
            if src >= self.data.len() {
                return Err(Error::Shape(format!(
                    "gather: index {src} out of {}",
                    self.data.len()
                )));
            }
            data.push(self.data[src]);
        }
        Ok(TensorOf {
            shape: shape.to_vec(),
            data,
        })
    }

    // -- normalization and convolutions ---------------------------------------

    /// Per-row layer normalization over the last axis with affine scale/shift.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: f64) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        if cols == 0 {
            return Err(Error::Shape("layer_norm: zero-length feature axis".into()));
        }
        if gamma.len() != cols || beta.len() != cols {
            return Err(Error::Shape(format!(
                "layer_norm: gamma/beta len {}/{} vs {cols}",
                gamma.len(),
                beta.len()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm: eps must be positive".into()));
        }
        let inv_n = S::from_f64(1.0 / cols as f64);
        let eps = S::from_f64(eps);
        let mut out = Self::zeros(&[rows, cols]);
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            let mut mean = S::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_n;
            let mut var = S::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let inv_std = S::ONE / (var + eps).sqrt();
            for c in 0..cols {
                let xhat = (row[c] - mean) * inv_std;
                out.data[r * cols + c] = gamma.data[c] * xhat + beta.data[c];
            }
        }
        Ok(out)
    }

    /// Depthwise causal 1-D convolution along the sequence axis with left
    /// zero padding of `K - 1`; output at `t` depends only on positions `<= t`.
    pub fn dwconv1d_causal(&self, kernel: &Self) -> Result<Self> {
        let (t_len, ch) = self.dims2()?;
        let (k_len, kc) = kernel.dims2()?;
        if kc != ch {
            return Err(Error::Shape(format!(
                "dwconv1d_causal: kernel channels {kc} vs input {ch}"
            )));
        }
        if k_len == 0 {
            return Err(Error::Shape("dwconv1d_causal: empty kernel".into()));
        }
        let mut out = Self::zeros(&[t_len, ch]);
        for t in 0..t_len {
            for k in 0..k_len {
                // tap k looks back (K - 1 - k) steps
                let back = k_len - 1 - k;
                if back > t {
                    continue;
                }
                let s = t - back;
                for c in 0..ch {
                    out.data[t * ch + c] += kernel.data[k * ch + c] * self.data[s * ch + c];
                }
            }
        }
        macs::add((t_len * k_len * ch) as u64);
        Ok(out)
    }

    /// Depthwise 2-D convolution over the patch grid with same-size zero
    /// padding. `self` is the token sequence `[gh*gw x C]` laid out in
    /// row-major raster order, `kernel` is `[K x K x C]` with odd `K`.
    pub fn dwconv2d(&self, gh: usize, gw: usize, kernel: &Self) -> Result<Self> {
        let (t_len, ch) = self.dims2()?;
        if t_len != gh * gw {
            return Err(Error::Shape(format!(
                "dwconv2d: sequence length {t_len} does not factor into {gh}x{gw}"
            )));
        }
        let k = match kernel.shape() {
            [a, b, c] if a == b && *c == ch => *a,
            other => {
                return Err(Error::Shape(format!(
                    "dwconv2d: kernel shape {other:?} vs [KxKx{ch}]"
                )))
            }
        };
        if k % 2 == 0 {
            return Err(Error::Shape("dwconv2d: kernel size must be odd".into()));
        }
        let pad = (k - 1) / 2;
        let mut out = Self::zeros(&[t_len, ch]);
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
                            out.data[dst + c] += kernel.data[ker + c] * self.data[src + c];
                        }
                    }
                }
            }
        }
        macs::add((gh * gw * k * k * ch) as u64);
        Ok(out)
    }
}

#[inline]
fn sigmoid_scalar<S: Scalar>(v: S) -> S {
    S::ONE / (S::ONE + (-v).exp())
}

/// `sqrt(2/pi)` for the GELU tanh approximation.
pub const GELU_C: f64 = 0.797_884_560_802_865_4;
pub const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu_scalar<S: Scalar>(v: S) -> S {
    let half = S::from_f64(0.5);
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    half * v * (S::ONE + (c * (v + a * v * v * v)).tanh())
}

// ---------------------------------------------------------------------------
// elementwise dispatcher
// ---------------------------------------------------------------------------

/// The elementwise op set exposed as a single dispatching entry point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Gelu,
    FlipSeq,
    Scale(f64),
}

/// Applies an elementwise op. `Add`/`Sub`/`Mul` take a second operand that is
/// either same-shape or a scalar (the only supported broadcasts); the rest are
/// unary.
pub fn elementwise<S: Scalar>(
    op: ElementwiseOp,
    a: &TensorOf<S>,
    b: Option<&TensorOf<S>>,
) -> Result<TensorOf<S>> {
    let binary = |f: fn(&TensorOf<S>, &TensorOf<S>) -> Result<TensorOf<S>>,
                  g: fn(&TensorOf<S>, f64) -> TensorOf<S>|
     -> Result<TensorOf<S>> {
        let b = b.ok_or_else(|| Error::Shape("elementwise: missing second operand".into()))?;
        if b.len() == 1 && a.shape() != b.shape() {
            Ok(g(a, b.data()[0].to_f64()))
        } else {
            f(a, b)
        }
    };
    match op {
        ElementwiseOp::Add => binary(TensorOf::add, |a, s| a.add_scalar(s)),
        ElementwiseOp::Sub => binary(TensorOf::sub, |a, s| a.add_scalar(-s)),
        ElementwiseOp::Mul => binary(TensorOf::mul, |a, s| a.scale(s)),
        ElementwiseOp::Sigmoid => Ok(a.sigmoid()),
        ElementwiseOp::Gelu => Ok(a.gelu()),
        ElementwiseOp::FlipSeq => a.flip_rows(),
        ElementwiseOp::Scale(c) => Ok(a.scale(c)),
    }
}
