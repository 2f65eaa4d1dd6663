//! Dense helpers that work for any [`Real`] scalar.

use nalgebra::{DMatrix, DVector};

use crate::scalar::Real;

/// Lower Cholesky factor of a symmetric positive definite matrix.
/// Returns `None` when a pivot is not strictly positive.
pub fn cholesky<T: Real>(a: &DMatrix<T>) -> Option<DMatrix<T>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = DMatrix::<T>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Solve `L L^T x = b` given the lower factor.
pub fn cholesky_solve<T: Real>(l: &DMatrix<T>, b: &DVector<T>) -> DVector<T> {
    let n = l.nrows();
    let mut y = b.clone();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// Solve `(A^T A + ridge I) X = A^T B` column by column. `ridge` may be zero
/// when `A` has full column rank.
pub fn ridge_solve<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, ridge: T) -> Option<DMatrix<T>> {
    let mut gram = a.transpose() * a;
    for i in 0..gram.nrows() {
        gram[(i, i)] += ridge;
    }
    let rhs = a.transpose() * b;
    let l = cholesky(&gram)?;
    let mut x = DMatrix::<T>::zeros(a.ncols(), b.ncols());
    for j in 0..b.ncols() {
        let col = cholesky_solve(&l, &rhs.column(j).into_owned());
        x.set_column(j, &col);
    }
    Some(x)
}
