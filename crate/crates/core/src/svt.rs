//! Classic singular value thresholding with a fixed iteration budget.
//!
//! Starting from `y⁰ = 0`, iteration `k = 1..=T` performs
//!
//! ```text
//! X^k = D_τ(A*(y^{k-1}))
//! y^k = y^{k-1} + δ·(b - A(X^k))
//! ```
//!
//! and the solver returns the read-out `D_τ(A*(y^T))`. The first iteration
//! always yields `X¹ = 0, y¹ = δb`, so a `T`-iteration run performs `T`
//! nontrivial dual updates, exactly matching a learned network with `T - 1`
//! hidden layers fed `y₀ = δb` followed by its output layer.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::svt_operator;
use crate::measurement::MeasurementOperator;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvtConfig {
    pub tau: f64,
    pub delta: f64,
    pub iterations: usize,
}

impl SvtConfig {
    pub fn new(tau: f64, delta: f64, iterations: usize) -> Result<Self> {
        let cfg = Self {
            tau,
            delta,
            iterations,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iteration budget must be at least 1".into()));
        }
        Ok(())
    }
}

/// Step size `1.2·d²/m`.
pub fn default_delta(dim: usize, rows: usize) -> f64 {
    1.2 * (dim * dim) as f64 / rows as f64
}

/// Threshold `5·d`.
pub fn default_tau(dim: usize) -> f64 {
    5.0 * dim as f64
}

pub fn default_config(dim: usize, rows: usize, iterations: usize) -> SvtConfig {
    SvtConfig {
        tau: default_tau(dim),
        delta: default_delta(dim, rows),
        iterations,
    }
}

pub fn svt_solve(
    op: &MeasurementOperator,
    b: &DVector<f64>,
    cfg: &SvtConfig,
) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    if b.len() != op.rows() {
        return Err(Error::dims(
            format!("measurement vector of length {}", op.rows()),
            format!("length {}", b.len()),
        ));
    }
    let mut y = DVector::zeros(op.rows());
    for k in 1..=cfg.iterations {
        let (x, _) = svt_operator(&op.adjoint(&y)?, cfg.tau)
            .map_err(|_| Error::NonFinite { stage: "svt iterate", index: k })?;
        let residual = b - op.apply(&x)?;
        y += residual * cfg.delta;
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "svt dual update",
                index: k,
            });
        }
    }
    let (x, _) = svt_operator(&op.adjoint(&y)?, cfg.tau).map_err(|_| Error::NonFinite {
        stage: "svt read-out",
        index: cfg.iterations + 1,
    })?;
    Ok(x)
}
