//! Dense SVD and the singular value soft-thresholding operator `D_τ`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Full SVD `X = U·diag(sigma)·Vᵀ` of a square matrix, `sigma` nonincreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub u: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl SvdFactors {
    pub fn dim(&self) -> usize {
        self.sigma.len()
    }

    /// `U·diag(values)·Vᵀ`.
    pub fn compose(&self, values: &DVector<f64>) -> DMatrix<f64> {
        let mut scaled = self.u.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= values[j];
        }
        scaled * self.v.transpose()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.compose(&self.sigma)
    }
}

pub fn svd(x: &DMatrix<f64>) -> Result<SvdFactors> {
    if !x.is_square() {
        return Err(Error::dims(
            "square matrix",
            format!("{}×{} matrix", x.nrows(), x.ncols()),
        ));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            stage: "svd input",
            index: 0,
        });
    }
    // nalgebra's bidiagonal SVD can return wrong factors for exactly
    // rank-deficient input; faer's is accurate across the board.
    let d = x.nrows();
    let decomposition = faer::Mat::<f64>::from_fn(d, d, |i, j| x[(i, j)])
        .svd()
        .map_err(|_| Error::NonFinite {
            stage: "svd iteration",
            index: 0,
        })?;
    let (u, s, v) = (decomposition.U(), decomposition.S(), decomposition.V());
    Ok(SvdFactors {
        u: DMatrix::from_fn(d, d, |i, j| u[(i, j)]),
        sigma: DVector::from_fn(d, |i, _| s[i]),
        v: DMatrix::from_fn(d, d, |i, j| v[(i, j)]),
    })
}

/// Soft-thresholded singular values `max(σ_i - τ, 0)`.
pub fn shrink(sigma: &DVector<f64>, tau: f64) -> DVector<f64> {
    sigma.map(|s| (s - tau).max(0.0))
}

/// `D_τ(X) = U·max(Σ - τI, 0)·Vᵀ`, returned together with the factors of `X`.
pub fn svt_operator(x: &DMatrix<f64>, tau: f64) -> Result<(DMatrix<f64>, SvdFactors)> {
    let factors = svd(x)?;
    let y = factors.compose(&shrink(&factors.sigma, tau));
    Ok((y, factors))
}

/// `‖X‖_tr`, the sum of singular values.
pub fn nuclear_norm(x: &DMatrix<f64>) -> Result<f64> {
    Ok(svd(x)?.sigma.sum())
}

/// Number of singular values above `tol · σ₁`.
pub fn numerical_rank(sigma: &DVector<f64>, tol: f64) -> usize {
    let top = sigma.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sigma.iter().filter(|&&s| s > tol * top).count()
}
