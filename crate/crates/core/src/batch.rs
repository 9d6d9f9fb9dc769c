//! Column-batched forward and backward passes.
//!
//! Mathematically identical to [`network::forward`](crate::network::forward) and
//! [`network::backward`](crate::network::backward), but every application of
//! `A`, `A*` and every weight-gradient outer product is done as one matrix
//! product over the batch, with one measurement vector per column.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{unvectorize, vectorize};
use crate::lowrank::{shrink, svd};
use crate::network::{threshold_backward, GradientTape, HiddenRecord, Theta, ThetaGrad};

fn stack(columns: &[&DVector<f64>], rows: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows, columns.len());
    for (j, col) in columns.iter().enumerate() {
        out.set_column(j, col);
    }
    out
}

fn non_finite(stage: &'static str, layer: usize) -> Error {
    Error::NonFinite {
        stage,
        index: layer,
    }
}

/// Thresholds every column of `z_cols` (each a row-major `vec(Z)`), returning
/// the thresholded matrices as columns plus the per-sample factors.
fn threshold_columns(
    z_cols: &DMatrix<f64>,
    dim: usize,
    tau: f64,
    layer: usize,
) -> Result<(DMatrix<f64>, Vec<crate::lowrank::SvdFactors>)> {
    if !z_cols.iter().all(|v| v.is_finite()) {
        return Err(non_finite("back-projection", layer));
    }
    let n = z_cols.ncols();
    let mut x_cols = DMatrix::zeros(dim * dim, n);
    let mut factors = Vec::with_capacity(n);
    for j in 0..n {
        let z = unvectorize(z_cols.column(j).as_slice(), dim);
        let f = svd(&z)?;
        let x = f.compose(&shrink(&f.sigma, tau));
        x_cols.set_column(j, &vectorize(&x));
        factors.push(f);
    }
    Ok((x_cols, factors))
}

/// Runs the network on every vector of `bs`. Tapes are built only when `keep_tapes`.
pub fn forward_batch(
    theta: &Theta,
    bs: &[&DVector<f64>],
    keep_tapes: bool,
) -> Result<(Vec<DMatrix<f64>>, Vec<GradientTape>)> {
    let (d, m, n) = (theta.dim, theta.rows, bs.len());
    if let Some(bad) = bs.iter().find(|b| b.len() != m) {
        return Err(Error::dims(
            format!("measurement vector of length {m}"),
            format!("length {}", bad.len()),
        ));
    }
    let b = stack(bs, m);
    let h = theta.hidden_layers();
    let mut y = &b * theta.deltas[0];
    let mut hidden: Vec<Vec<HiddenRecord>> = if keep_tapes {
        (0..n).map(|_| Vec::with_capacity(h)).collect()
    } else {
        Vec::new()
    };
    for t in 1..=h {
        let w = &theta.weights[t - 1];
        let z = w.tr_mul(&y);
        let (x_cols, factors) = threshold_columns(&z, d, theta.taus[t - 1], t)?;
        let residual = &b - w * &x_cols;
        let next = &y + &residual * theta.deltas[t];
        if !next.iter().all(|v| v.is_finite()) {
            return Err(non_finite("hidden state", t));
        }
        if keep_tapes {
            for (j, f) in factors.into_iter().enumerate() {
                hidden[j].push(HiddenRecord {
                    input: y.column(j).into_owned(),
                    factors: f,
                    thresholded: unvectorize(x_cols.column(j).as_slice(), d),
                    residual: residual.column(j).into_owned(),
                });
            }
        }
        y = next;
    }
    let z = theta.weights[h].tr_mul(&y);
    let (x_cols, factors) = threshold_columns(&z, d, theta.taus[h], h + 1)?;
    let outputs: Vec<DMatrix<f64>> = (0..n)
        .map(|j| unvectorize(x_cols.column(j).as_slice(), d))
        .collect();
    let tapes = if keep_tapes {
        hidden
            .into_iter()
            .zip(factors)
            .enumerate()
            .map(|(j, (records, f))| GradientTape {
                b: bs[j].clone(),
                hidden: records,
                output_input: y.column(j).into_owned(),
                output_factors: f,
                output: outputs[j].clone(),
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok((outputs, tapes))
}

/// Sum over the batch of the per-sample gradients of `‖X_true - X_out‖_F²`.
pub fn backward_batch(
    tapes: &[GradientTape],
    theta: &Theta,
    truths: &[&DMatrix<f64>],
) -> Result<ThetaGrad> {
    let (d, m, n) = (theta.dim, theta.rows, tapes.len());
    let h = theta.hidden_layers();
    if truths.len() != n {
        return Err(Error::dims(format!("{n} targets"), truths.len()));
    }
    if tapes.iter().any(|t| t.hidden.len() != h) {
        return Err(Error::InvalidArgument("tape depth does not match theta".into()));
    }
    let mut grad = theta.zero_grad();

    let mut grad_z = DMatrix::zeros(d * d, n);
    let mut inputs = DMatrix::zeros(m, n);
    for (j, (tape, truth)) in tapes.iter().zip(truths).enumerate() {
        let upstream = (&tape.output - *truth) * 2.0;
        let (gz, gtau) = threshold_backward(&tape.output_factors, theta.taus[h], &upstream);
        grad.taus[h] += gtau;
        grad_z.set_column(j, &vectorize(&gz));
        inputs.set_column(j, &tape.output_input);
    }
    grad.weights[h].gemm(1.0, &inputs, &grad_z.transpose(), 0.0);
    let mut grad_y = &theta.weights[h] * &grad_z;

    for t in (1..=h).rev() {
        let w = &theta.weights[t - 1];
        let mut residuals = DMatrix::zeros(m, n);
        let mut thresholded = DMatrix::zeros(d * d, n);
        for (j, tape) in tapes.iter().enumerate() {
            let rec = &tape.hidden[t - 1];
            residuals.set_column(j, &rec.residual);
            thresholded.set_column(j, &vectorize(&rec.thresholded));
            inputs.set_column(j, &rec.input);
        }
        grad.deltas[t] = grad_y.dot(&residuals);
        let grad_residual = &grad_y * theta.deltas[t];
        grad.weights[t - 1].gemm(-1.0, &grad_residual, &thresholded.transpose(), 0.0);
        let grad_x = w.tr_mul(&grad_residual) * -1.0;
        for (j, tape) in tapes.iter().enumerate() {
            let upstream = unvectorize(grad_x.column(j).as_slice(), d);
            let (gz, gtau) =
                threshold_backward(&tape.hidden[t - 1].factors, theta.taus[t - 1], &upstream);
            grad.taus[t - 1] += gtau;
            grad_z.set_column(j, &vectorize(&gz));
        }
        grad.weights[t - 1].gemm(1.0, &inputs, &grad_z.transpose(), 1.0);
        grad_y += w * &grad_z;
    }
    for (j, tape) in tapes.iter().enumerate() {
        grad.deltas[0] += grad_y.column(j).dot(&tape.b);
    }

    if !grad.is_finite() {
        return Err(non_finite("gradient", 0));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, SplitSizes};
    use crate::network::{backward, forward};

    #[test]
    fn batched_passes_match_single_sample_passes() {
        let sizes = SplitSizes {
            train: 9,
            validation: 1,
            test: 1,
        };
        let ds = generate_dataset(5, 2, 18, sizes, 21).unwrap();
        let mut theta = Theta::init(&ds.operator, 2, 3.0, 1.1);
        theta.weights[1][(2, 3)] += 0.05;
        theta.deltas[2] = 0.8;
        let bs: Vec<&DVector<f64>> = ds.train.iter().map(|i| &i.b).collect();
        let truths: Vec<&DMatrix<f64>> = ds.train.iter().map(|i| &i.x).collect();
        let (outs, tapes) = forward_batch(&theta, &bs, true).unwrap();
        let batch_grad = backward_batch(&tapes, &theta, &truths).unwrap();

        let mut sum = theta.zero_grad();
        for (inst, out) in ds.train.iter().zip(&outs) {
            let (x, tape) = forward(&theta, &inst.b).unwrap();
            assert!((x - out).amax() < 1e-12);
            sum.add_assign(&backward(&tape, &theta, &inst.x).unwrap());
        }
        for (a, b) in batch_grad.buffers().iter().zip(sum.buffers()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn prediction_only_skips_tapes() {
        let sizes = SplitSizes {
            train: 3,
            validation: 1,
            test: 1,
        };
        let ds = generate_dataset(4, 1, 9, sizes, 2).unwrap();
        let theta = Theta::init_default(&ds.operator, 1);
        let bs: Vec<&DVector<f64>> = ds.train.iter().map(|i| &i.b).collect();
        let (outs, tapes) = forward_batch(&theta, &bs, false).unwrap();
        assert_eq!(outs.len(), 3);
        assert!(tapes.is_empty());
        let short = DVector::zeros(8);
        assert!(forward_batch(&theta, &[&short], false).is_err());
    }
}
