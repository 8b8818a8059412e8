//! Dense row-major matrices over a switchable scalar type.
//!
//! Everything in the crate computes on [`Matrix<T>`] where `T` implements
//! [`Scalar`]. Training runs use `f32`; gradient checks and test oracles
//! instantiate the same code at `f64`, so numerical comparisons exercise the
//! identical kernel rather than a parallel implementation.
//!
//! Storage is `Arc<Vec<T>>` with copy-on-write mutation. Cloning a matrix is
//! a reference-count bump, which keeps parameter snapshots and tape constants
//! cheap; the first in-place mutation of a shared buffer copies it.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Scalar-level operations the numeric kernels need, implemented for `f32`
/// and `f64`. The GEMM hook dispatches to a tuned kernel per type; all other
/// arithmetic comes from `num_traits::Float`.
pub trait Scalar:
    num_traits::Float
    + fmt::Debug
    + fmt::Display
    + Default
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Type tag stored in checkpoint headers.
    const DTYPE: &'static str;
    /// Bytes per element in serialized form.
    const BYTES: usize;

    /// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers with the
    /// given strides (in elements). Thin wrapper over `matrixmultiply`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    /// One standard-normal draw. Kept on the trait so generic code can sample
    /// without threading `rand_distr` bounds everywhere.
    fn std_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> Self;

    /// Lossy conversion from `f64` (identity for `f64`, rounding for `f32`).
    fn from_f64(v: f64) -> Self;

    /// Widening conversion to `f64`.
    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        // Safety: callers (below) size the buffers to exactly m*k, k*n, m*n
        // and pass strides describing those buffers.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
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

    fn std_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        f64::from(self)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes for f32"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
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

    fn std_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes for f64"))
    }
}

/// Dense row-major matrix. Row vectors (biases, per-unit parameters) are
/// `1 x n` matrices so that every tape value has a uniform type.
#[derive(Clone, PartialEq)]
pub struct Matrix<T: Scalar> {
    rows: usize,
    cols: usize,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix<{}>({}x{})", T::DTYPE, self.rows, self.cols)?;
        if self.len() <= 16 {
            write!(f, " {:?}", self.as_slice())?;
        }
        Ok(())
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Matrix {
            rows,
            cols,
            data: Arc::new(vec![value; rows * cols]),
        }
    }

    /// Takes ownership of a row-major buffer. Panics if the length is wrong;
    /// this is a constructor for internally generated data, not a parser.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "buffer length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix {
            rows,
            cols,
            data: Arc::new(data),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    /// 1 x n row vector.
    pub fn row_vector(values: Vec<T>) -> Self {
        let cols = values.len();
        Self::from_vec(1, cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Returns a `Dimension` error unless `self` and `other` have equal shape.
    pub fn require_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::dimension(op, self.shape_string(), other.shape_string()))
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; copies the buffer first if it is shared.
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        debug_assert!(r < self.rows && c < self.cols);
        let cols = self.cols;
        self.as_mut_slice()[r * cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        debug_assert!(r < self.rows);
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols.max(1))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    /// Elementwise combine; shapes must match (internal invariant).
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert!(
            self.same_shape(other),
            "zip_map shape mismatch: {} vs {}",
            self.shape_string(),
            other.shape_string()
        );
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        for x in self.as_mut_slice() {
            *x = f(*x);
        }
    }

    /// `self += other`, used for gradient accumulation.
    pub fn add_assign(&mut self, other: &Self) {
        assert!(
            self.same_shape(other),
            "add_assign shape mismatch: {} vs {}",
            self.shape_string(),
            other.shape_string()
        );
        let dst = Arc::make_mut(&mut self.data);
        for (d, &s) in dst.iter_mut().zip(other.data.iter()) {
            *d = *d + s;
        }
    }

    /// `self += alpha * other`.
    pub fn scaled_add_assign(&mut self, alpha: T, other: &Self) {
        assert!(self.same_shape(other), "scaled_add_assign shape mismatch");
        let dst = Arc::make_mut(&mut self.data);
        for (d, &s) in dst.iter_mut().zip(other.data.iter()) {
            *d = *d + alpha * s;
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|x| alpha * x)
    }

    /// `self (m,k) * rhs (k,n) -> (m,n)`.
    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(
            self.cols,
            rhs.rows,
            "matmul inner dimension mismatch: {} vs {}",
            self.shape_string(),
            rhs.shape_string()
        );
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            k as isize,
            1,
            &rhs.data,
            n as isize,
            1,
            T::zero(),
            &mut out,
        );
        Matrix::from_vec(m, n, out)
    }

    /// `self (m,k) * rhs^T` where `rhs` is `(n,k)` -> `(m,n)`.
    pub fn matmul_nt(&self, rhs: &Self) -> Self {
        assert_eq!(
            self.cols,
            rhs.cols,
            "matmul_nt inner dimension mismatch: {} vs {}",
            self.shape_string(),
            rhs.shape_string()
        );
        let (m, k, n) = (self.rows, self.cols, rhs.rows);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            k as isize,
            1,
            &rhs.data,
            1,
            k as isize,
            T::zero(),
            &mut out,
        );
        Matrix::from_vec(m, n, out)
    }

    /// `self^T * rhs` where `self` is `(k,m)` and `rhs` is `(k,n)` -> `(m,n)`.
    pub fn matmul_tn(&self, rhs: &Self) -> Self {
        assert_eq!(
            self.rows,
            rhs.rows,
            "matmul_tn inner dimension mismatch: {} vs {}",
            self.shape_string(),
            rhs.shape_string()
        );
        let (k, m, n) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            1,
            m as isize,
            &rhs.data,
            n as isize,
            1,
            T::zero(),
            &mut out,
        );
        Matrix::from_vec(m, n, out)
    }

    pub fn transpose(&self) -> Self {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn col_sums(&self) -> Vec<T> {
        let mut sums = vec![T::zero(); self.cols];
        for row in self.rows_iter() {
            for (s, &v) in sums.iter_mut().zip(row) {
                *s = *s + v;
            }
        }
        sums
    }

    pub fn col_means(&self) -> Vec<T> {
        let n = T::from_f64(self.rows as f64);
        self.col_sums().into_iter().map(|s| s / n).collect()
    }

    /// Population (1/N) per-column variance around the supplied means.
    pub fn col_vars(&self, means: &[T]) -> Vec<T> {
        assert_eq!(means.len(), self.cols);
        let mut vars = vec![T::zero(); self.cols];
        for row in self.rows_iter() {
            for ((v, &m), &x) in vars.iter_mut().zip(means).zip(row) {
                let d = x - m;
                *v = *v + d * d;
            }
        }
        let n = T::from_f64(self.rows as f64);
        for v in &mut vars {
            *v = *v / n;
        }
        vars
    }

    /// Sum of squared entries.
    pub fn frobenius_sq(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Gathers the given rows into a new matrix (batch selection).
    pub fn take_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_vec(indices.len(), self.cols, data)
    }

    /// Stacks matrices vertically; all must share a column count.
    pub fn vstack(parts: &[&Self]) -> Self {
        assert!(!parts.is_empty(), "vstack of nothing");
        let cols = parts[0].cols;
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            assert_eq!(p.cols, cols, "vstack column mismatch");
            data.extend_from_slice(p.as_slice());
        }
        Matrix::from_vec(rows, cols, data)
    }

    /// Returns the row range `[start, end)` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.rows);
        Matrix::from_vec(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute entry; zero for empty matrices.
    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    /// Converts element type, used to move test fixtures between precisions.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        )
    }
}
