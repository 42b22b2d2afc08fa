//! Dense row-major matrices and the seeded random source.
//!
//! Rows are samples and columns are features throughout the crate, so an
//! `n x p` feature block is a `Matrix` with `n` rows.

use std::fmt;

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense 2-D array stored row-major. `data.len() == rows * cols` always holds.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Element-wise binary operators. See [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::new", (rows, cols), (data.len(), 1)));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::one())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", (rows.len(), cols), (1, r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// An `n x 1` column vector.
    pub fn column(values: Vec<T>) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    /// A `1 x n` row vector.
    pub fn row_vector(values: Vec<T>) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
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
    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> + '_ {
        // chunks(0) panics; an n x 0 matrix has n empty rows
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * m..(i + 1) * m];
            for (kk, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let b_row = &other.data[kk * m..(kk + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.rows != other.rows {
            return Err(Error::shape("t_matmul", self.shape(), other.shape()));
        }
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![T::zero(); n * m];
        for kk in 0..k {
            let a_row = &self.data[kk * n..(kk + 1) * n];
            let b_row = &other.data[kk * m..(kk + 1) * m];
            for (i, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let out_row = &mut out[i * m..(i + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.cols {
            return Err(Error::shape("matmul_t", self.shape(), other.shape()));
        }
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b_row = &other.data[j * k..(j + 1) * k];
                out.push(a_row.iter().zip(b_row).map(|(&a, &b)| a * b).sum());
            }
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.data[r * self.cols + c]);
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Matrix<T> {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        elementwise(ElemOp::Add, self, other)
    }

    pub fn sub(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        elementwise(ElemOp::Sub, self, other)
    }

    pub fn hadamard(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        elementwise(ElemOp::Mul, self, other)
    }

    /// Column sums as a `1 x cols` row.
    pub fn sum_rows(&self) -> Matrix<T> {
        let mut out = vec![T::zero(); self.cols];
        for row in self.iter_rows() {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        Matrix::row_vector(out)
    }

    /// Column means as a `1 x cols` row. Zero rows yield zeros.
    pub fn mean_rows(&self) -> Matrix<T> {
        if self.rows == 0 {
            return Matrix::zeros(1, self.cols);
        }
        let n = T::from_usize(self.rows).expect("row count fits scalar");
        self.sum_rows().map(|x| x / n)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn l1_norm(&self) -> T {
        self.data.iter().map(|x| x.abs()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix<T> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_cols(&self, idx: &[usize]) -> Matrix<T> {
        let mut data = Vec::with_capacity(idx.len() * self.rows);
        for row in self.iter_rows() {
            data.extend(idx.iter().map(|&c| row[c]));
        }
        Matrix {
            rows: self.rows,
            cols: idx.len(),
            data,
        }
    }

    /// Top-left `rows x cols` block, clipped to the matrix size.
    pub fn top_left(&self, rows: usize, cols: usize) -> Matrix<T> {
        let rows = rows.min(self.rows);
        let cols: Vec<usize> = (0..cols.min(self.cols)).collect();
        let idx: Vec<usize> = (0..rows).collect();
        self.select_rows(&idx).select_cols(&cols)
    }

    /// Appends rows of `other` below `self`.
    pub fn vstack(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.cols {
            return Err(Error::shape("vstack", self.shape(), other.shape()));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x.as_f64()).collect()
    }
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{row:?}")?;
        }
        write!(f, "]")
    }
}

/// Applies `op` element by element. `b` may also be a single row, which is
/// broadcast across every row of `a`.
pub fn elementwise<T: Scalar>(op: ElemOp, a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    let f = match op {
        ElemOp::Add => |x: T, y: T| x + y,
        ElemOp::Sub => |x: T, y: T| x - y,
        ElemOp::Mul => |x: T, y: T| x * y,
    };
    let data = if a.shape() == b.shape() {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    } else if b.rows == 1 && b.cols == a.cols {
        let mut data = Vec::with_capacity(a.data.len());
        for row in a.iter_rows() {
            data.extend(row.iter().zip(&b.data).map(|(&x, &y)| f(x, y)));
        }
        data
    } else {
        return Err(Error::shape("elementwise", a.shape(), b.shape()));
    };
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}

/// Seeded pseudo-random source.
///
/// Backed by ChaCha8, whose output stream is fixed by the seed on every
/// platform. Uniforms take the top 53 bits of one `u64`; normals use the
/// Box-Muller cosine branch and consume exactly two uniforms per draw.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derives an independent stream for a named purpose from a base seed.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `rows x cols` i.i.d. draws from `N(0, sigma²)`.
pub fn randn<T: Scalar>(rng: &mut Rng, rows: usize, cols: usize, sigma: f64) -> Result<Matrix<T>> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::Parameter(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(Matrix::zeros(rows, cols));
    }
    let data = (0..rows * cols).map(|_| T::lit(sigma * rng.normal())).collect();
    Ok(Matrix { rows, cols, data })
}
