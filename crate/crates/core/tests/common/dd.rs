//! Double-double arithmetic (~32 significant digits) and an independent
//! forward pass built on it, used as the finite-difference oracle.

use std::ops::{Add, Div, Mul, Neg, Sub};

use lsvt::network::Theta;
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn from(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::ZERO;
        }
        // One Newton step from the double-precision root.
        let x = Dd::from(self.hi.sqrt());
        x + (self - x * x) / (x * Dd::from(2.0))
    }

    pub fn max(self, other: Self) -> Self {
        if self > other {
            self
        } else {
            other
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::from(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::from(q2);
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::from(q3)
    }
}

type Mat = Vec<Vec<Dd>>;

/// Parameters lifted to double-double so perturbations are exact.
#[derive(Clone)]
pub struct DdTheta {
    dim: usize,
    weights: Vec<Mat>,
    deltas: Vec<Dd>,
    taus: Vec<Dd>,
}

impl DdTheta {
    pub fn lift(theta: &Theta) -> Self {
        DdTheta {
            dim: theta.dim,
            weights: theta
                .weights
                .iter()
                .map(|w| {
                    (0..w.nrows())
                        .map(|i| (0..w.ncols()).map(|j| Dd::from(w[(i, j)])).collect())
                        .collect()
                })
                .collect(),
            deltas: theta.deltas.iter().map(|&v| Dd::from(v)).collect(),
            taus: theta.taus.iter().map(|&v| Dd::from(v)).collect(),
        }
    }

    /// Mutable access in the flat order of `Theta::buffers`; weights are
    /// addressed by nalgebra's column-major index.
    pub fn perturb(&mut self, buffer: usize, index: usize, step: Dd) {
        let layers = self.weights.len();
        if buffer < layers {
            let rows = self.weights[buffer].len();
            let (i, j) = (index % rows, index / rows);
            self.weights[buffer][i][j] = self.weights[buffer][i][j] + step;
        } else if buffer == layers {
            self.deltas[index] = self.deltas[index] + step;
        } else {
            self.taus[index] = self.taus[index] + step;
        }
    }
}

fn dot(a: &[Dd], b: &[Dd]) -> Dd {
    a.iter().zip(b).fold(Dd::ZERO, |acc, (&x, &y)| acc + x * y)
}

/// `unvec(Wᵀy)` as a row-major d×d matrix.
fn adjoint(w: &Mat, y: &[Dd], d: usize) -> Mat {
    let mut z = vec![vec![Dd::ZERO; d]; d];
    for (i, row) in w.iter().enumerate() {
        for (k, &wk) in row.iter().enumerate() {
            z[k / d][k % d] = z[k / d][k % d] + wk * y[i];
        }
    }
    z
}

fn apply(w: &Mat, x: &Mat, d: usize) -> Vec<Dd> {
    let flat: Vec<Dd> = (0..d * d).map(|k| x[k / d][k % d]).collect();
    w.iter().map(|row| dot(row, &flat)).collect()
}

/// One-sided Jacobi SVD, then `Σ_j max(σ_j - τ, 0)·u_j v_jᵀ`.
fn soft_threshold(z: &Mat, tau: Dd) -> Mat {
    let d = z.len();
    // Columns of Z.
    let mut cols: Vec<Vec<Dd>> = (0..d).map(|j| (0..d).map(|i| z[i][j]).collect()).collect();
    let mut v: Vec<Vec<Dd>> = (0..d)
        .map(|j| (0..d).map(|i| if i == j { Dd::ONE } else { Dd::ZERO }).collect())
        .collect();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..d {
            for q in p + 1..d {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs().to_f64() <= 1e-31 * (alpha * beta).sqrt().to_f64() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (Dd::from(2.0) * gamma);
                let t = Dd::ONE / (zeta.abs() + (Dd::ONE + zeta * zeta).sqrt());
                let t = if zeta.hi < 0.0 { -t } else { t };
                let c = Dd::ONE / (Dd::ONE + t * t).sqrt();
                let s = c * t;
                for k in 0..d {
                    let (ap, aq) = (cols[p][k], cols[q][k]);
                    cols[p][k] = c * ap - s * aq;
                    cols[q][k] = s * ap + c * aq;
                    let (vp, vq) = (v[p][k], v[q][k]);
                    v[p][k] = c * vp - s * vq;
                    v[q][k] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut out = vec![vec![Dd::ZERO; d]; d];
    for j in 0..d {
        let sigma = dot(&cols[j], &cols[j]).sqrt();
        let shrunk = (sigma - tau).max(Dd::ZERO);
        if shrunk.hi == 0.0 {
            continue;
        }
        let scale = shrunk / sigma;
        for r in 0..d {
            for c in 0..d {
                out[r][c] = out[r][c] + scale * cols[j][r] * v[j][c];
            }
        }
    }
    out
}

pub fn loss(theta: &DdTheta, b: &DVector<f64>, truth: &DMatrix<f64>) -> Dd {
    let d = theta.dim;
    let b: Vec<Dd> = b.iter().map(|&v| Dd::from(v)).collect();
    let mut y: Vec<Dd> = b.iter().map(|&v| theta.deltas[0] * v).collect();
    let hidden = theta.weights.len() - 1;
    for t in 1..=hidden {
        let w = &theta.weights[t - 1];
        let x = soft_threshold(&adjoint(w, &y, d), theta.taus[t - 1]);
        let ax = apply(w, &x, d);
        for i in 0..y.len() {
            y[i] = y[i] + theta.deltas[t] * (b[i] - ax[i]);
        }
    }
    let x = soft_threshold(&adjoint(&theta.weights[hidden], &y, d), theta.taus[hidden]);
    let mut total = Dd::ZERO;
    for r in 0..d {
        for c in 0..d {
            let e = x[r][c] - Dd::from(truth[(r, c)]);
            total = total + e * e;
        }
    }
    total
}

/// Central differences of the extended-precision loss, in `Theta::buffers` order.
pub fn central_differences(
    theta: &Theta,
    b: &DVector<f64>,
    truth: &DMatrix<f64>,
    step: f64,
) -> Vec<Vec<f64>> {
    let base = DdTheta::lift(theta);
    let h = Dd::from(step);
    theta
        .buffers()
        .iter()
        .enumerate()
        .map(|(k, buf)| {
            (0..buf.len())
                .map(|i| {
                    let mut plus = base.clone();
                    plus.perturb(k, i, h);
                    let mut minus = base.clone();
                    minus.perturb(k, i, -h);
                    ((loss(&plus, b, truth) - loss(&minus, b, truth)) / (h + h)).to_f64()
                })
                .collect()
        })
        .collect()
}
