//! Dense row-major matrices and the handful of kernels the attention
//! paths are built from.
//!
//! Everything here is deterministic. Products optionally report their
//! multiply-accumulate count to a [`MacCounter`]; elementwise work
//! (softmax, sigmoid, scaling) is never counted.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape {
                rows,
                cols,
                reason: "matrices must have at least one row and one column",
            });
        }
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    lhs: (0, cols),
                    rhs: (i, row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Result<Self> {
        Self::from_vec(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(n, n)?;
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        Ok(m)
    }

    /// Builds a matrix entry by entry.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_vec(rows, cols, data)
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: T) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![T::zero(); self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// Copies columns `start..start + width`.
    pub fn col_block(&self, start: usize, width: usize) -> Result<Self> {
        if width == 0 || start + width > self.cols {
            return Err(Error::Dimension {
                op: "col_block",
                lhs: self.shape(),
                rhs: (start, width),
            });
        }
        let mut data = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + width]);
        }
        Self::from_vec(self.rows, width, data)
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_col_block(&mut self, start: usize, block: &Self) -> Result<()> {
        if block.rows != self.rows || start + block.cols > self.cols {
            return Err(Error::Dimension {
                op: "set_col_block",
                lhs: self.shape(),
                rhs: block.shape(),
            });
        }
        for i in 0..self.rows {
            let w = block.cols;
            self.row_mut(i)[start..start + w].copy_from_slice(block.row(i));
        }
        Ok(())
    }

    /// Returns a copy with rows reordered so that row `i` is `self.row(perm[i])`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.rows || perm.iter().any(|&p| p >= self.rows) {
            return Err(Error::Dimension {
                op: "permute_rows",
                lhs: self.shape(),
                rhs: (perm.len(), 1),
            });
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.row(p));
        }
        Self::from_vec(self.rows, self.cols, data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
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

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// In-place `self *= s`.
    pub fn scale_mut(&mut self, s: T) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op: "add_assign",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Multiplies row `i` by `factors[i]` (a per-token gate broadcast across features).
    pub fn scale_rows(&self, factors: &[T]) -> Result<Self> {
        if factors.len() != self.rows {
            return Err(Error::Dimension {
                op: "scale_rows",
                lhs: self.shape(),
                rhs: (factors.len(), 1),
            });
        }
        let mut out = self.clone();
        for (i, &f) in factors.iter().enumerate() {
            for x in out.row_mut(i) {
                *x *= f;
            }
        }
        Ok(out)
    }

    /// Per-row sums as a vector.
    pub fn row_sums(&self) -> Vec<T> {
        (0..self.rows)
            .map(|i| self.row(i).iter().copied().sum())
            .collect()
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        let d = self.sub(other)?;
        Ok(d.data.iter().fold(T::zero(), |m, &x| m.max(x.abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts every entry to `f64`.
    pub fn to_f64(&self) -> Matrix<f64> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|x| x.to_f64().unwrap_or(f64::NAN))
                .collect(),
        }
    }
}

/// Running multiply-accumulate tally for one computation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MacCounter {
    macs: u128,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, macs: u128) {
        self.macs += macs;
    }

    pub fn count(&self) -> u128 {
        self.macs
    }
}

/// Seeded generator for weights and synthetic features.
///
/// Backed by ChaCha8 seeded through `seed_from_u64`, so a given seed
/// yields the same stream on every platform for this crate version.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw from `[0, 1)`.
    pub fn next_unit(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform draw from `[-scale, scale)`.
    pub fn symmetric(&mut self, scale: f64) -> f64 {
        (2.0 * self.next_unit() - 1.0) * scale
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.gen_range(0..=i);
            p.swap(i, j);
        }
        p
    }
}

/// Matrix with entries uniform in `[-scale, scale]`.
pub fn rand_matrix<T: Scalar>(
    rows: usize,
    cols: usize,
    rng: &mut Rng,
    scale: f64,
) -> Result<Matrix<T>> {
    if rows == 0 || cols == 0 {
        return Err(Error::Shape {
            rows,
            cols,
            reason: "random matrices need positive dimensions",
        });
    }
    let data = (0..rows * cols)
        .map(|_| T::from_f64_lossy(rng.symmetric(scale)))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

#[derive(Clone, Copy)]
enum Side {
    Plain,
    Transposed,
}

fn strides<T>(m: &Matrix<T>, side: Side) -> (isize, isize) {
    match side {
        Side::Plain => (m.cols as isize, 1),
        Side::Transposed => (1, m.cols as isize),
    }
}

fn product<T: Scalar>(
    a: &Matrix<T>,
    sa: Side,
    b: &Matrix<T>,
    sb: Side,
    counter: Option<&mut MacCounter>,
    op: &'static str,
) -> Result<Matrix<T>> {
    let (m, k) = match sa {
        Side::Plain => a.shape(),
        Side::Transposed => (a.cols, a.rows),
    };
    let (k2, n) = match sb {
        Side::Plain => b.shape(),
        Side::Transposed => (b.cols, b.rows),
    };
    if k != k2 {
        return Err(Error::Dimension {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut data = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        &a.data,
        strides(a, sa),
        &b.data,
        strides(b, sb),
        &mut data,
    );
    if let Some(c) = counter {
        c.add((m * k * n) as u128);
    }
    Matrix::from_vec(m, n, data)
}

/// `a · b`. Adds `a.rows · a.cols · b.cols` to `counter` when given.
pub fn matmul<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    counter: Option<&mut MacCounter>,
) -> Result<Matrix<T>> {
    product(a, Side::Plain, b, Side::Plain, counter, "matmul")
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    counter: Option<&mut MacCounter>,
) -> Result<Matrix<T>> {
    product(a, Side::Plain, b, Side::Transposed, counter, "matmul_nt")
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    counter: Option<&mut MacCounter>,
) -> Result<Matrix<T>> {
    product(a, Side::Transposed, b, Side::Plain, counter, "matmul_tn")
}

/// Row-wise softmax with per-row max subtraction.
pub fn row_softmax<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    row_softmax_mut(&mut out);
    out
}

/// [`row_softmax`] without the copy; attention maps are large.
pub fn row_softmax_mut<T: Scalar>(x: &mut Matrix<T>) {
    for i in 0..x.rows {
        let row = x.row_mut(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // Branch on sign so the exponent never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Elementwise logistic sigmoid.
pub fn sigmoid<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(sigmoid_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_product_is_noop() {
        let a = m(&[&[1.5, -2.0], &[0.25, 7.0]]);
        let i = Matrix::identity(2).unwrap();
        assert_eq!(matmul(&i, &a, None).unwrap(), a);
    }

    #[test]
    fn hand_computed_product() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(
            matmul(&a, &b, None).unwrap(),
            m(&[&[19.0, 22.0], &[43.0, 50.0]])
        );
    }

    #[test]
    fn product_counts_macs() {
        let mut rng = Rng::new(1);
        let a: Matrix<f64> = rand_matrix(3, 4, &mut rng, 1.0).unwrap();
        let b = rand_matrix(4, 5, &mut rng, 1.0).unwrap();
        let mut c = MacCounter::new();
        matmul(&a, &b, Some(&mut c)).unwrap();
        assert_eq!(c.count(), 60);
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = Rng::new(2);
        let a: Matrix<f64> = rand_matrix(3, 4, &mut rng, 1.0).unwrap();
        let b = rand_matrix(5, 4, &mut rng, 1.0).unwrap();
        let nt = matmul_nt(&a, &b, None).unwrap();
        let explicit = matmul(&a, &b.transpose(), None).unwrap();
        assert!(nt.max_abs_diff(&explicit).unwrap() < 1e-15);

        let c = rand_matrix(3, 2, &mut rng, 1.0).unwrap();
        let tn = matmul_tn(&a, &c, None).unwrap();
        let explicit = matmul(&a.transpose(), &c, None).unwrap();
        assert!(tn.max_abs_diff(&explicit).unwrap() < 1e-15);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Matrix::<f64>::zeros(2, 3).unwrap();
        let b = Matrix::<f64>::zeros(2, 3).unwrap();
        let err = matmul(&a, &b, None).unwrap_err();
        assert_eq!(
            err,
            Error::Dimension {
                op: "matmul",
                lhs: (2, 3),
                rhs: (2, 3)
            }
        );
        assert!(err.to_string().contains("(2, 3) vs (2, 3)"));
    }

    #[test]
    fn softmax_examples() {
        let s = row_softmax(&m(&[&[0.0, 0.0]]));
        assert_eq!(s.row(0), &[0.5, 0.5]);

        let s = row_softmax(&m(&[&[1000.0, 1000.0, 1000.0]]));
        for &v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let s = row_softmax(&m(&[&[0.0, 3f64.ln()]]));
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert!((sigmoid_scalar(3f64.ln()) - 0.75).abs() < 1e-15);
        for x in [-30.0, -2.5, 0.1, 4.0, 700.0] {
            let s: f64 = sigmoid_scalar(x) + sigmoid_scalar(-x);
            assert!((s - 1.0).abs() < 1e-15);
        }
        assert!(sigmoid_scalar(-800.0f64).is_finite());
    }

    #[test]
    fn rand_matrix_contract() {
        let z: Matrix<f64> = rand_matrix(3, 3, &mut Rng::new(4), 0.0).unwrap();
        assert!(z.as_slice().iter().all(|&x| x == 0.0));

        let a: Matrix<f64> = rand_matrix(4, 4, &mut Rng::new(9), 1.0).unwrap();
        let b: Matrix<f64> = rand_matrix(4, 4, &mut Rng::new(9), 1.0).unwrap();
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|x| x.abs() <= 1.0));

        let c: Matrix<f64> = rand_matrix(4, 4, &mut Rng::new(10), 1.0).unwrap();
        assert_ne!(a, c);

        assert!(matches!(
            rand_matrix::<f64>(0, 3, &mut Rng::new(1), 1.0),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn col_blocks_round_trip() {
        let a: Matrix<f64> = rand_matrix(3, 6, &mut Rng::new(3), 1.0).unwrap();
        let mut b = Matrix::zeros(3, 6).unwrap();
        b.set_col_block(0, &a.col_block(0, 2).unwrap()).unwrap();
        b.set_col_block(2, &a.col_block(2, 4).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_precision_kernel() {
        let a = Matrix::<f32>::from_rows(&[[1.0f32, 2.0], [3.0, 4.0]]).unwrap();
        let b = Matrix::<f32>::from_rows(&[[5.0f32, 6.0], [7.0, 8.0]]).unwrap();
        let c = matmul(&a, &b, None).unwrap();
        assert_eq!(c.as_slice(), &[19.0, 22.0, 43.0, 50.0]);
    }
}
