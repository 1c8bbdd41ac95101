//! Backward rules for the op kinds the block is built from. Each takes the
//! values its forward cached plus the upstream gradient.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Matrix};

/// `out = a · b` ⇒ `(∂a, ∂b) = (∂out · bᵀ, aᵀ · ∂out)`.
pub fn matmul_backward<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    d_out: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    Ok((matmul_nt(d_out, b, None)?, matmul_tn(a, d_out, None)?))
}

/// `out = a · bᵀ` ⇒ `(∂a, ∂b) = (∂out · b, ∂outᵀ · a)`.
pub fn matmul_nt_backward<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    d_out: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    Ok((matmul(d_out, b, None)?, matmul_tn(d_out, a, None)?))
}

/// Row softmax with output `s`: `∂x = s ⊙ (∂s − rowsum(∂s ⊙ s))`.
pub fn softmax_backward<T: Scalar>(s: &Matrix<T>, d_out: &Matrix<T>) -> Result<Matrix<T>> {
    let mut dx = d_out.hadamard(s)?;
    for i in 0..dx.rows() {
        let dot: T = dx.row(i).iter().copied().sum();
        for (v, &si) in dx.row_mut(i).iter_mut().zip(s.row(i)) {
            *v -= si * dot;
        }
    }
    Ok(dx)
}

/// Sigmoid with output `y`: `∂x = ∂y · y(1 − y)`.
pub fn sigmoid_backward<T: Scalar>(y: T, d_out: T) -> T {
    d_out * y * (T::one() - y)
}

/// `out = diag(g) · x` ⇒ `∂x = diag(g) · ∂out`, `∂g_i = ⟨∂out_i, x_i⟩`.
pub fn scale_rows_backward<T: Scalar>(
    x: &Matrix<T>,
    g: &[T],
    d_out: &Matrix<T>,
) -> Result<(Matrix<T>, Vec<T>)> {
    let dx = d_out.scale_rows(g)?;
    let dg = d_out.hadamard(x)?.row_sums();
    Ok((dx, dg))
}

/// `z_i = mean over maps and columns` ⇒ every entry of row `i` receives `∂z_i / (maps · cols)`.
pub fn mean_backward<T: Scalar>(
    dz: &[T],
    maps: usize,
    rows: usize,
    cols: usize,
) -> Result<Matrix<T>> {
    let denom = T::from_usize(maps * cols).unwrap();
    Matrix::from_fn(rows, cols, |i, _| dz[i] / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_gradient() {
        // loss = ‖A·x‖² ⇒ ∂x = 2·Aᵀ·A·x
        let a = Matrix::from_rows(&[[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]]).unwrap();
        let x = Matrix::from_rows(&[[0.7], [-0.2]]).unwrap();
        let y = matmul(&a, &x, None).unwrap();
        let (_, dx) = matmul_backward(&a, &x, &y.scale(2.0)).unwrap();
        let expected = matmul(&matmul_tn(&a, &a, None).unwrap(), &x, None)
            .unwrap()
            .scale(2.0);
        assert!(dx.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn softmax_backward_matches_jacobian() {
        let s = Matrix::<f64>::from_rows(&[[0.2, 0.3, 0.5]]).unwrap();
        let g = Matrix::from_rows(&[[1.0, -2.0, 0.5]]).unwrap();
        let dx = softmax_backward(&s, &g).unwrap();
        // J = diag(s) − s sᵀ, ∂x = Jᵀ g
        for j in 0..3 {
            let mut v = 0.0;
            for i in 0..3 {
                let jac = if i == j { s.get(0, i) } else { 0.0 } - s.get(0, i) * s.get(0, j);
                v += jac * g.get(0, i);
            }
            assert!((dx.get(0, j) - v).abs() < 1e-15);
        }
    }
}
