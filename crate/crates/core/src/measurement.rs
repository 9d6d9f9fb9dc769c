//! The linear sampling operator `A(X) = (tr[A_1 X], ..., tr[A_m X])` and its adjoint.
//!
//! The operator is stored as a single `m × d²` matrix `W` with `A(X) = W·vec(X)`
//! under the crate-wide row-major vectorization. Consequently `tr[A_i X]` equals
//! the inner product of row `i` with `vec(X)`, which pins `A_i = unvec(row_i)ᵀ`
//! and `A*(y) = Σ y_i A_iᵀ = unvec(Wᵀy)`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{unvectorize, vectorize};

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementOperator {
    dim: usize,
    matrix: DMatrix<f64>,
}

impl MeasurementOperator {
    /// Draws an `m × d²` Gaussian matrix and orthonormalizes its rows, so that
    /// `tr[A_iᵀ A_j] = δ_ij`. Deterministic in `seed`.
    pub fn generate(dim: usize, rows: usize, seed: u64) -> Result<Self> {
        if dim == 0 || rows == 0 {
            return Err(Error::InvalidConfig(format!(
                "operator needs d ≥ 1 and m ≥ 1 (got d={dim}, m={rows})"
            )));
        }
        let cols = dim * dim;
        if rows > cols {
            return Err(Error::InvalidConfig(format!(
                "cannot build {rows} orthonormal rows in dimension d²={cols}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Column j of `gaussian` becomes row j of W after orthonormalization.
        let gaussian =
            DMatrix::from_fn(cols, rows, |_, _| StandardNormal.sample(&mut rng));
        let q = gaussian.qr().q();
        Ok(Self {
            dim,
            matrix: q.transpose(),
        })
    }

    /// Wraps an existing `m × d²` matrix. Orthonormality is checked to `tol`.
    pub fn from_matrix(dim: usize, matrix: DMatrix<f64>, tol: f64) -> Result<Self> {
        if matrix.ncols() != dim * dim {
            return Err(Error::dims(
                format!("{} columns", dim * dim),
                format!("{} columns", matrix.ncols()),
            ));
        }
        let op = Self { dim, matrix };
        let err = op.orthonormality_error();
        if !(err < tol) {
            return Err(Error::InvalidConfig(format!(
                "measurement rows are not orthonormal (max |WWᵀ - I| = {err:e})"
            )));
        }
        Ok(op)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `A(X)`, one measurement per row of `W`.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.shape() != (self.dim, self.dim) {
            return Err(Error::dims(
                format!("{0}×{0} matrix", self.dim),
                format!("{}×{} matrix", x.nrows(), x.ncols()),
            ));
        }
        Ok(forward_map(&self.matrix, x))
    }

    /// `A*(y) = Σ_i y_i A_iᵀ`.
    pub fn adjoint(&self, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        if y.len() != self.rows() {
            return Err(Error::dims(
                format!("vector of length {}", self.rows()),
                format!("vector of length {}", y.len()),
            ));
        }
        Ok(adjoint_map(&self.matrix, y, self.dim))
    }

    /// The `i`-th measurement matrix `A_i`, with `tr[A_i X] = A(X)_i`.
    pub fn measurement_matrix(&self, i: usize) -> DMatrix<f64> {
        let row: Vec<f64> = self.matrix.row(i).iter().copied().collect();
        unvectorize(&row, self.dim).transpose()
    }

    /// `max |WWᵀ - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = &self.matrix * self.matrix.transpose();
        let mut worst = 0.0f64;
        for i in 0..gram.nrows() {
            for j in 0..gram.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[(i, j)] - target).abs());
            }
        }
        worst
    }
}

/// `W·vec(X)` for an arbitrary (possibly learned) `m × d²` matrix.
pub fn forward_map(w: &DMatrix<f64>, x: &DMatrix<f64>) -> DVector<f64> {
    w * vectorize(x)
}

/// `unvec(Wᵀy)` for an arbitrary (possibly learned) `m × d²` matrix.
pub fn adjoint_map(w: &DMatrix<f64>, y: &DVector<f64>, dim: usize) -> DMatrix<f64> {
    let v = w.tr_mul(y);
    unvectorize(v.as_slice(), dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn square_operator_is_orthogonal() {
        let op = MeasurementOperator::generate(2, 4, 3).unwrap();
        assert_eq!(op.matrix().shape(), (4, 4));
        assert!(op.orthonormality_error() < 1e-10);
        let wtw = op.matrix().transpose() * op.matrix();
        assert!((wtw - DMatrix::identity(4, 4)).amax() < 1e-10);
    }

    #[test]
    fn oversampled_rank_one_operator() {
        let op = MeasurementOperator::generate(10, 57, 11).unwrap();
        assert_eq!(op.matrix().shape(), (57, 100));
        assert!(op.orthonormality_error() < 1e-10);
    }

    #[test]
    fn too_many_rows_is_rejected() {
        assert!(matches!(
            MeasurementOperator::generate(2, 5, 0),
            Err(Error::InvalidConfig(_))
        ));
        assert!(MeasurementOperator::generate(0, 1, 0).is_err());
    }

    #[test]
    fn same_seed_same_operator() {
        let a = MeasurementOperator::generate(5, 12, 99).unwrap();
        let b = MeasurementOperator::generate(5, 12, 99).unwrap();
        let c = MeasurementOperator::generate(5, 12, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn apply_zero_and_identity() {
        let op = MeasurementOperator::generate(3, 5, 1).unwrap();
        let zero = op.apply(&DMatrix::zeros(3, 3)).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));

        let ident = MeasurementOperator::from_matrix(2, DMatrix::identity(4, 4), 1e-12).unwrap();
        let x = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 3.5, 4.0]);
        assert_eq!(ident.apply(&x).unwrap().as_slice(), &[1.0, -2.0, 3.5, 4.0]);
    }

    #[test]
    fn measurements_are_traces() {
        let op = MeasurementOperator::generate(4, 9, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_matrix(&mut rng, 4, 4);
        let b = op.apply(&x).unwrap();
        for i in 0..9 {
            let trace = (op.measurement_matrix(i) * &x).trace();
            assert!((trace - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_of_basis_vector_is_transposed_measurement_matrix() {
        let op = MeasurementOperator::generate(3, 7, 2).unwrap();
        for i in 0..7 {
            let e = DVector::from_fn(7, |k, _| if k == i { 1.0 } else { 0.0 });
            let got = op.adjoint(&e).unwrap();
            assert!((got - op.measurement_matrix(i).transpose()).amax() < 1e-15);
        }
        let zero = op.adjoint(&DVector::zeros(7)).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_identity_and_linearity() {
        let op = MeasurementOperator::generate(5, 20, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let x = random_matrix(&mut rng, 5, 5);
            let z = random_matrix(&mut rng, 5, 5);
            let y = DVector::from_fn(20, |_, _| rng.random_range(-1.0..1.0));
            let lhs = op.apply(&x).unwrap().dot(&y);
            let rhs = x.dot(&op.adjoint(&y).unwrap());
            assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));

            let (alpha, beta) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let combined = op.apply(&(&x * alpha + &z * beta)).unwrap();
            let separate = op.apply(&x).unwrap() * alpha + op.apply(&z).unwrap() * beta;
            assert!((combined - separate).amax() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let op = MeasurementOperator::generate(3, 4, 0).unwrap();
        assert!(matches!(op.apply(&DMatrix::zeros(2, 3)), Err(Error::Dimension { .. })));
        assert!(matches!(op.adjoint(&DVector::zeros(5)), Err(Error::Dimension { .. })));
        assert!(MeasurementOperator::from_matrix(3, DMatrix::zeros(4, 8), 1e-10).is_err());
        assert!(MeasurementOperator::from_matrix(2, DMatrix::zeros(2, 4), 1e-10).is_err());
    }
}
