//! Row-major vectorization helpers shared by every module.
//!
//! `vec(X)[i * d + j] = X[(i, j)]`. nalgebra stores column-major, so the
//! row-major vectorization of `X` is the column-major storage of `Xᵀ`.

use nalgebra::{DMatrix, DVector};

pub fn vectorize(x: &DMatrix<f64>) -> DVector<f64> {
    let (rows, cols) = x.shape();
    DVector::from_iterator(
        rows * cols,
        (0..rows).flat_map(|i| (0..cols).map(move |j| x[(i, j)])),
    )
}

pub fn unvectorize(v: &[f64], d: usize) -> DMatrix<f64> {
    debug_assert_eq!(v.len(), d * d);
    DMatrix::from_row_slice(d, d, v)
}

pub fn frobenius_sq(x: &DMatrix<f64>) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn frobenius_dist_sq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum()
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
}

pub fn all_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    values.into_iter().all(|v| v.is_finite())
}
