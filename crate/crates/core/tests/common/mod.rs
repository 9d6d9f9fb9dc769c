#![allow(dead_code)]

pub mod dd;

use lsvt::lowrank::svd;
use lsvt::network::{forward, Theta};
use lsvt::MeasurementOperator;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_low_rank(rng: &mut ChaCha8Rng, d: usize, r: usize) -> DMatrix<f64> {
    let normal = Normal::new(0.0, 2f64.sqrt()).unwrap();
    let p = DMatrix::from_fn(d, r, |_, _| normal.sample(rng));
    let q = DMatrix::from_fn(r, d, |_, _| normal.sample(rng));
    p * q
}

pub fn sample_loss(theta: &Theta, b: &DVector<f64>, truth: &DMatrix<f64>) -> f64 {
    let (x, _) = forward(theta, b).unwrap();
    (x - truth).norm_squared()
}

/// Smallest distance between any singular value and that layer's threshold.
pub fn threshold_margin(theta: &Theta, b: &DVector<f64>) -> f64 {
    let (_, tape) = forward(theta, b).unwrap();
    let mut margin = f64::INFINITY;
    let layers = tape
        .hidden
        .iter()
        .map(|h| &h.factors)
        .chain(std::iter::once(&tape.output_factors));
    for (factors, tau) in layers.zip(&theta.taus) {
        for s in factors.sigma.iter() {
            margin = margin.min((s - tau).abs());
        }
    }
    margin
}

/// Central-difference gradient of the single-sample loss over every parameter,
/// in the flat buffer order of `Theta::buffers`. The loss is evaluated in
/// double-double precision so the difference quotient is not roundoff-bound.
pub fn finite_difference_gradient(
    theta: &Theta,
    b: &DVector<f64>,
    truth: &DMatrix<f64>,
    step: f64,
) -> Vec<Vec<f64>> {
    dd::central_differences(theta, b, truth, step)
}

/// A small random problem whose layers stay away from threshold kinks.
pub struct GradProblem {
    pub theta: Theta,
    pub b: DVector<f64>,
    pub truth: DMatrix<f64>,
}

pub fn draw_grad_problem(
    rng: &mut ChaCha8Rng,
    d: usize,
    m: usize,
    r: usize,
    hidden: usize,
) -> GradProblem {
    loop {
        let op = MeasurementOperator::generate(d, m, rng.random()).unwrap();
        let truth = gaussian_low_rank(rng, d, r);
        let b = op.apply(&truth).unwrap();
        // Perturb every parameter so the gradient check is not at the symmetric
        // initialization only.
        let mut theta = Theta::init(
            &op,
            hidden,
            rng.random_range(0.5..3.0),
            rng.random_range(0.3..1.5),
        );
        for w in theta.weights.iter_mut() {
            for v in w.iter_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
        for v in theta.deltas.iter_mut().chain(theta.taus.iter_mut()) {
            *v *= rng.random_range(0.8..1.2);
        }
        let top = svd(&op.adjoint(&(&b * theta.deltas[0])).unwrap()).unwrap().sigma[0];
        if top <= theta.taus[0] {
            continue;
        }
        if threshold_margin(&theta, &b) < 1e-4 {
            continue;
        }
        return GradProblem { theta, b, truth };
    }
}

/// Worst violation of the gradient-check tolerance: relative error where
/// `|fd| > floor`, absolute otherwise.
pub fn gradient_mismatch(analytic: &[&[f64]], numeric: &[Vec<f64>], floor: f64) -> (f64, f64) {
    let mut worst_rel = 0.0f64;
    let mut worst_abs = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&ga, &gn) in a.iter().zip(n) {
            if gn.abs() > floor {
                worst_rel = worst_rel.max((ga - gn).abs() / gn.abs());
            } else {
                worst_abs = worst_abs.max((ga - gn).abs());
            }
        }
    }
    (worst_rel, worst_abs)
}
