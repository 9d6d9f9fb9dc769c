//! The unrolled, trainable SVT network.
//!
//! A `T`-layer network has `H = T - 1` hidden layers and one output layer:
//!
//! ```text
//! y_0 = δ_0·b
//! y_t = y_{t-1} + δ_t·(b - A(D_{τ_t}(A*(y_{t-1}; W_t)); W_t))     t = 1..H
//! X_out = D_{τ_{H+1}}(A*(y_H; W_{H+1}))
//! ```
//!
//! Each `W_t` is an `m × d²` matrix used for both `A` and `A*` of its layer.
//! The backward pass is written out by hand, including the derivative of the
//! singular value soft-threshold.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_dist_sq, unvectorize, vectorize};
use crate::lowrank::{shrink, svd, SvdFactors};
use crate::measurement::{adjoint_map, forward_map, MeasurementOperator};

/// Relative floor on `|σ_i² - σ_j²|` in the SVD backward pass.
pub const GAP_EPSILON: f64 = 1e-9;

/// Tag recorded in checkpoints: `H = T - 1` hidden layers plus an output layer,
/// step sizes `δ_0..δ_H`, thresholds and weights for layers `1..=H+1`.
pub const LAYER_CONVENTION: &str = "hidden=T-1+output;delta=0..H;tau=1..H+1";

/// Learnable parameters. `weights[t-1]`, `taus[t-1]` belong to layer `t`
/// (the last entry is the output layer); `deltas[0]` scales the input and
/// `deltas[t]` is the step size of hidden layer `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub dim: usize,
    pub rows: usize,
    pub weights: Vec<DMatrix<f64>>,
    pub deltas: Vec<f64>,
    pub taus: Vec<f64>,
}

/// Gradient of the loss with respect to every field of [`Theta`].
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaGrad {
    pub weights: Vec<DMatrix<f64>>,
    pub deltas: Vec<f64>,
    pub taus: Vec<f64>,
}

impl Theta {
    /// Every layer starts from the measurement operator, one shared step size
    /// and one shared threshold.
    pub fn init(op: &MeasurementOperator, hidden_layers: usize, tau: f64, delta: f64) -> Self {
        Self {
            dim: op.dim(),
            rows: op.rows(),
            weights: vec![op.matrix().clone(); hidden_layers + 1],
            deltas: vec![delta; hidden_layers + 1],
            taus: vec![tau; hidden_layers + 1],
        }
    }

    /// Initialization matching the SVT defaults `τ = 5d`, `δ = 1.2·d²/m`.
    pub fn init_default(op: &MeasurementOperator, hidden_layers: usize) -> Self {
        Self::init(
            op,
            hidden_layers,
            crate::svt::default_tau(op.dim()),
            crate::svt::default_delta(op.dim(), op.rows()),
        )
    }

    pub fn hidden_layers(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let layers = self.weights.len();
        if layers == 0 {
            return Err(Error::InvalidArgument("theta has no layers".into()));
        }
        if self.deltas.len() != layers || self.taus.len() != layers {
            return Err(Error::dims(
                format!("{layers} step sizes and thresholds"),
                format!("{} and {}", self.deltas.len(), self.taus.len()),
            ));
        }
        for w in &self.weights {
            if w.shape() != (self.rows, self.dim * self.dim) {
                return Err(Error::dims(
                    format!("{}×{} weight", self.rows, self.dim * self.dim),
                    format!("{}×{}", w.nrows(), w.ncols()),
                ));
            }
        }
        if !self.buffers().iter().all(|b| b.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite {
                stage: "theta",
                index: 0,
            });
        }
        Ok(())
    }

    pub fn zero_grad(&self) -> ThetaGrad {
        ThetaGrad {
            weights: self
                .weights
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            deltas: vec![0.0; self.deltas.len()],
            taus: vec![0.0; self.taus.len()],
        }
    }

    /// Flat views in the fixed order: weights by layer, deltas, taus.
    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.weights.iter().map(|w| w.as_slice()).collect();
        out.push(&self.deltas);
        out.push(&self.taus);
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> =
            self.weights.iter_mut().map(|w| w.as_mut_slice()).collect();
        out.push(&mut self.deltas);
        out.push(&mut self.taus);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }
}

impl ThetaGrad {
    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.weights.iter().map(|w| w.as_slice()).collect();
        out.push(&self.deltas);
        out.push(&self.taus);
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> =
            self.weights.iter_mut().map(|w| w.as_mut_slice()).collect();
        out.push(&mut self.deltas);
        out.push(&mut self.taus);
        out
    }

    fn same_shape(&self, other: &ThetaGrad) -> bool {
        self.weights.len() == other.weights.len()
            && self.deltas.len() == other.deltas.len()
            && self.taus.len() == other.taus.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn add_assign(&mut self, other: &ThetaGrad) {
        for (dst, src) in self.buffers_mut().into_iter().zip(other.buffers()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for buf in self.buffers_mut() {
            for v in buf.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.buffers().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.buffers()
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

/// Intermediates of one hidden layer.
#[derive(Debug, Clone)]
pub struct HiddenRecord {
    pub input: DVector<f64>,
    pub factors: SvdFactors,
    pub thresholded: DMatrix<f64>,
    pub residual: DVector<f64>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct GradientTape {
    pub b: DVector<f64>,
    pub hidden: Vec<HiddenRecord>,
    pub output_input: DVector<f64>,
    pub output_factors: SvdFactors,
    pub output: DMatrix<f64>,
}

fn check_finite(values: &[f64], stage: &'static str, layer: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage,
            index: layer,
        })
    }
}

fn threshold(z: &DMatrix<f64>, tau: f64, layer: usize) -> Result<(DMatrix<f64>, SvdFactors)> {
    check_finite(z.as_slice(), "back-projection", layer)?;
    let factors = svd(z)?;
    let x = factors.compose(&shrink(&factors.sigma, tau));
    Ok((x, factors))
}

pub fn forward(theta: &Theta, b: &DVector<f64>) -> Result<(DMatrix<f64>, GradientTape)> {
    if b.len() != theta.rows {
        return Err(Error::dims(
            format!("measurement vector of length {}", theta.rows),
            format!("length {}", b.len()),
        ));
    }
    let d = theta.dim;
    let h = theta.hidden_layers();
    let mut y = b * theta.deltas[0];
    let mut hidden = Vec::with_capacity(h);
    for t in 1..=h {
        let w = &theta.weights[t - 1];
        let z = adjoint_map(w, &y, d);
        let (x, factors) = threshold(&z, theta.taus[t - 1], t)?;
        let residual = b - forward_map(w, &x);
        let next = &y + &residual * theta.deltas[t];
        check_finite(next.as_slice(), "hidden state", t)?;
        hidden.push(HiddenRecord {
            input: std::mem::replace(&mut y, next),
            factors,
            thresholded: x,
            residual,
        });
    }
    let z = adjoint_map(&theta.weights[h], &y, d);
    let (output, output_factors) = threshold(&z, theta.taus[h], h + 1)?;
    let tape = GradientTape {
        b: b.clone(),
        hidden,
        output_input: y,
        output_factors,
        output: output.clone(),
    };
    Ok((output, tape))
}

/// Forward pass without keeping a tape.
pub fn predict(theta: &Theta, b: &DVector<f64>) -> Result<DMatrix<f64>> {
    forward(theta, b).map(|(x, _)| x)
}

/// Pulls `∂L/∂Y` back through `Y = D_τ(Z)` given the SVD of `Z`.
/// Returns `(∂L/∂Z, ∂L/∂τ)`.
pub fn threshold_backward(
    factors: &SvdFactors,
    tau: f64,
    upstream: &DMatrix<f64>,
) -> (DMatrix<f64>, f64) {
    let d = factors.dim();
    let sigma = &factors.sigma;
    let shrunk = shrink(sigma, tau);
    // One-sided derivative: h'(σ) = 0 at σ = τ.
    let active: Vec<f64> = sigma.iter().map(|&s| if s > tau { 1.0 } else { 0.0 }).collect();
    let gamma = factors.u.transpose() * upstream * &factors.v;

    let top = sigma[0];
    let gap_floor = (GAP_EPSILON * top * top).max(f64::MIN_POSITIVE);
    let mut inner = DMatrix::zeros(d, d);
    let mut grad_tau = 0.0;
    for i in 0..d {
        inner[(i, i)] = active[i] * gamma[(i, i)];
        grad_tau -= active[i] * gamma[(i, i)];
        for j in 0..d {
            if i == j {
                continue;
            }
            let gap = sigma[i] * sigma[i] - sigma[j] * sigma[j];
            let inv_gap = if gap.abs() < gap_floor {
                gap.signum() / gap_floor
            } else {
                1.0 / gap
            };
            let sym = (sigma[i] * shrunk[i] - sigma[j] * shrunk[j]) * inv_gap;
            let cross = (sigma[j] * shrunk[i] - sigma[i] * shrunk[j]) * inv_gap;
            inner[(i, j)] = sym * gamma[(i, j)] + cross * gamma[(j, i)];
        }
    }
    let grad_z = &factors.u * inner * factors.v.transpose();
    (grad_z, grad_tau)
}

/// Reverse-mode gradient of `‖X_true - X_out‖_F²` for one sample.
pub fn backward(tape: &GradientTape, theta: &Theta, truth: &DMatrix<f64>) -> Result<ThetaGrad> {
    let d = theta.dim;
    if truth.shape() != (d, d) {
        return Err(Error::dims(
            format!("{d}×{d} target"),
            format!("{}×{}", truth.nrows(), truth.ncols()),
        ));
    }
    let h = theta.hidden_layers();
    if tape.hidden.len() != h {
        return Err(Error::InvalidArgument(format!(
            "tape has {} hidden layers, theta has {h}",
            tape.hidden.len()
        )));
    }
    let mut grad = theta.zero_grad();

    let grad_out = (&tape.output - truth) * 2.0;
    let (grad_z, grad_tau) = threshold_backward(&tape.output_factors, theta.taus[h], &grad_out);
    grad.taus[h] = grad_tau;
    let grad_z = vectorize(&grad_z);
    grad.weights[h].ger(1.0, &tape.output_input, &grad_z, 1.0);
    let mut grad_y = &theta.weights[h] * &grad_z;

    for t in (1..=h).rev() {
        let record = &tape.hidden[t - 1];
        let w = &theta.weights[t - 1];
        grad.deltas[t] = grad_y.dot(&record.residual);
        let grad_residual = &grad_y * theta.deltas[t];
        // residual = b - W·vec(X)
        grad.weights[t - 1].ger(-1.0, &grad_residual, &vectorize(&record.thresholded), 1.0);
        let grad_x = unvectorize(w.tr_mul(&grad_residual).as_slice(), d) * -1.0;
        let (grad_z, grad_tau) = threshold_backward(&record.factors, theta.taus[t - 1], &grad_x);
        grad.taus[t - 1] = grad_tau;
        let grad_z = vectorize(&grad_z);
        grad.weights[t - 1].ger(1.0, &record.input, &grad_z, 1.0);
        grad_y += w * &grad_z;
    }
    grad.deltas[0] = grad_y.dot(&tape.b);

    if !grad.is_finite() {
        return Err(Error::NonFinite {
            stage: "gradient",
            index: 0,
        });
    }
    Ok(grad)
}

/// `(1/M)·Σ_i ‖X_true⁽ⁱ⁾ - X_pred⁽ⁱ⁾‖_F²`.
pub fn mse_loss(pred: &[DMatrix<f64>], truth: &[DMatrix<f64>]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::dims(
            format!("{} targets", pred.len()),
            format!("{}", truth.len()),
        ));
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        if p.shape() != t.shape() {
            return Err(Error::dims(
                format!("{}×{}", t.nrows(), t.ncols()),
                format!("{}×{}", p.nrows(), p.ncols()),
            ));
        }
        total += frobenius_dist_sq(p, t);
    }
    Ok(total / pred.len() as f64)
}

/// Elementwise mean of per-sample gradients.
pub fn accumulate(grads: &[ThetaGrad]) -> Result<ThetaGrad> {
    let (first, rest) = grads
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("no gradients to accumulate".into()))?;
    let mut total = first.clone();
    for g in rest {
        if !total.same_shape(g) {
            return Err(Error::InvalidArgument("gradient shapes differ".into()));
        }
        total.add_assign(g);
    }
    total.scale(1.0 / grads.len() as f64);
    Ok(total)
}
