//! Minimal dense row-major matrices with the handful of operations the QRNN
//! needs, plus an operation counter used as the ground truth for FLOPs.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use thiserror::Error;

/// Floating point element type. `f32` is the default for inference and
/// benchmarking; `f64` exists so finite-difference gradient checks are
/// meaningful.
pub trait Real: Float + Debug + Display + Default + Sum + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength {
        len: usize,
        rows: usize,
        cols: usize,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Counts scalar multiplications and additions (subtractions count as
/// additions). Activation functions are not counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub multiplications: u64,
    pub additions: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn flops(&self) -> u64 {
        self.multiplications + self.additions
    }

    pub fn record(&mut self, multiplications: u64, additions: u64) {
        self.multiplications += multiplications;
        self.additions += additions;
    }
}

/// Records into an optional counter.
#[inline]
pub(crate) fn count(counter: &mut Option<&mut OpCounter>, mults: u64, adds: u64) {
    if let Some(c) = counter.as_deref_mut() {
        c.record(mults, adds);
    }
}

/// A dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                len: data.len(),
                rows,
                cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; test helper.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Column vector from a slice.
    pub fn column(values: &[T]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies column `c` out.
    pub fn col(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn set_col(&mut self, c: usize, values: &[T]) {
        debug_assert_eq!(values.len(), self.rows);
        for (r, &v) in values.iter().enumerate() {
            self.set(r, c, v);
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Keeps the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// Keeps the listed columns, in the given order.
    pub fn select_cols(&self, cols: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        Self {
            rows: self.rows,
            cols: cols.len(),
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts element type (rounding when narrowing).
    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<(), TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    fn zip_with(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Self, TensorError> {
        self.check_same(other, op)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), TensorError> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    // Split by sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    x.map(sigmoid_scalar)
}

pub fn tanh<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    x.map(T::tanh)
}

/// `a · b`. With a counter attached, records `m·n·k` multiplications and
/// `m·n·(k−1)` additions; the arithmetic itself is identical either way.
pub fn matmul<T: Real>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    mut counter: Option<&mut OpCounter>,
) -> Result<Matrix<T>, TensorError> {
    if a.cols != b.rows {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    if k > 0 {
        for i in 0..m {
            let a_row = &a.data[i * k..(i + 1) * k];
            let o_row = &mut out.data[i * n..(i + 1) * n];
            o_row.copy_from_slice(&b.data[..n]);
            let a0 = a_row[0];
            for o in o_row.iter_mut() {
                *o = *o * a0;
            }
            for (p, &av) in a_row.iter().enumerate().skip(1) {
                let b_row = &b.data[p * n..(p + 1) * n];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o = *o + av * bv;
                }
            }
        }
    }
    let (m, n, k) = (m as u64, n as u64, k as u64);
    count(&mut counter, m * n * k, m * n * k.saturating_sub(1));
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose. Uncounted; used by backward.
pub(crate) fn matmul_tn<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.rows, b.rows, "matmul_tn dimension mismatch");
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    for p in 0..k {
        let a_row = &a.data[p * m..(p + 1) * m];
        let b_row = &b.data[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let o_row = &mut out.data[i * n..(i + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` without materializing the transpose. Uncounted; used by backward.
pub(crate) fn matmul_nt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.cols, b.cols, "matmul_nt dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b.data[j * k..(j + 1) * k];
            out.data[i * n + j] = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// Numerically stable log-softmax (max-subtracted).
pub fn log_softmax<T: Real>(logits: &[T]) -> Result<Vec<T>, TensorError> {
    if logits.is_empty() {
        return Err(TensorError::Empty("log_softmax"));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = logits.iter().map(|&x| (x - max).exp()).sum();
    let log_z = max + sum.ln();
    Ok(logits.iter().map(|&x| x - log_z).collect())
}

/// `−log softmax(logits)[target]`.
pub fn cross_entropy<T: Real>(logits: &[T], target: usize) -> Result<T, TensorError> {
    if target >= logits.len() {
        if logits.is_empty() {
            return Err(TensorError::Empty("cross_entropy"));
        }
        return Err(TensorError::IndexOutOfRange {
            index: target,
            len: logits.len(),
        });
    }
    Ok(-log_softmax(logits)?[target])
}
