//! ADAM training of the unrolled network with validation after every update
//! and patience-based early stopping.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::LowRankInstance;
use crate::error::{Error, Result};
use crate::linalg::frobenius_dist_sq;
use crate::measurement::MeasurementOperator;
use crate::batch::{backward_batch, forward_batch};
use crate::network::{predict, Theta, ThetaGrad};
use crate::svt::{svt_solve, SvtConfig};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Samples per work unit when a minibatch is fanned out. Fixed so that the
/// summation order, and therefore the result, does not depend on thread count.
const CHUNK: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub shuffle_seed: u64,
    /// Validate after every `val_every` updates.
    pub val_every: usize,
    /// A validation loss counts as a new best only below `best·(1 - min_rel_improvement)`.
    pub min_rel_improvement: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 1000,
            patience: 200,
            max_epochs: 500,
            shuffle_seed: 0,
            val_every: 1,
            min_rel_improvement: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.patience == 0 || self.val_every == 0 {
            return Err(Error::InvalidConfig(
                "batch size, patience and validation interval must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub theta: Theta,
    pub first_moment: ThetaGrad,
    pub second_moment: ThetaGrad,
    pub step: usize,
    pub best_val: f64,
    pub best_theta: Theta,
    pub since_improvement: usize,
}

impl TrainState {
    pub fn new(theta: Theta) -> Self {
        Self {
            first_moment: theta.zero_grad(),
            second_moment: theta.zero_grad(),
            step: 0,
            best_val: f64::INFINITY,
            best_theta: theta.clone(),
            since_improvement: 0,
            theta,
        }
    }
}

/// One bias-corrected ADAM update. A non-finite gradient leaves the state untouched.
pub fn adam_step(state: &mut TrainState, grad: &ThetaGrad, lr: f64) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::NonFinite {
            stage: "adam gradient",
            index: state.step + 1,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let correction1 = 1.0 - ADAM_BETA1.powi(t);
    let correction2 = 1.0 - ADAM_BETA2.powi(t);
    let params = state.theta.buffers_mut();
    let firsts = state.first_moment.buffers_mut();
    let seconds = state.second_moment.buffers_mut();
    for (((p, m), v), g) in params.into_iter().zip(firsts).zip(seconds).zip(grad.buffers()) {
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / correction1;
            let v_hat = v[i] / correction2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
    Ok(())
}

/// Mean single-sample loss and mean gradient over `batch`.
pub fn batch_gradient(theta: &Theta, batch: &[&LowRankInstance]) -> Result<(f64, ThetaGrad)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    let partials: Vec<Result<(f64, ThetaGrad)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let bs: Vec<&DVector<f64>> = chunk.iter().map(|i| &i.b).collect();
            let truths: Vec<&DMatrix<f64>> = chunk.iter().map(|i| &i.x).collect();
            let (outs, tapes) = forward_batch(theta, &bs, true)?;
            let loss = outs.iter().zip(&truths).map(|(x, t)| frobenius_dist_sq(x, t)).sum();
            Ok((loss, backward_batch(&tapes, theta, &truths)?))
        })
        .collect();
    let mut loss = 0.0;
    let mut total = theta.zero_grad();
    for part in partials {
        let (l, g) = part?;
        loss += l;
        total.add_assign(&g);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

/// Anything that maps measurements to a reconstruction.
#[derive(Debug, Clone, Copy)]
pub enum Solver<'a> {
    Svt(&'a MeasurementOperator, SvtConfig),
    Lsvt(&'a Theta),
}

impl Solver<'_> {
    pub fn reconstruct(&self, b: &DVector<f64>) -> Result<DMatrix<f64>> {
        match self {
            Solver::Svt(op, cfg) => svt_solve(op, b, cfg),
            Solver::Lsvt(theta) => predict(theta, b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean of `‖X - X̂‖_F² / d²` over finite reconstructions.
    pub mse: f64,
    /// Mean of `‖X - X̂‖_F²` over finite reconstructions.
    pub mean_sq_error: f64,
    /// Per-instance `‖X - X̂‖_F² / d²`; `NaN` marks a failed reconstruction.
    pub per_instance: Vec<f64>,
    pub non_finite: usize,
    pub count: usize,
}

impl EvalReport {
    /// Quantile of the finite per-instance errors (nearest rank).
    pub fn quantile(&self, q: f64) -> f64 {
        let mut finite: Vec<f64> = self.per_instance.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return f64::NAN;
        }
        finite.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        let idx = ((q.clamp(0.0, 1.0) * (finite.len() - 1) as f64).round()) as usize;
        finite[idx]
    }
}

pub fn evaluate(solver: Solver<'_>, split: &[LowRankInstance]) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let d2 = (split[0].x.nrows() * split[0].x.ncols()) as f64;
    // T SVT iterations are the network at initialization with T - 1 hidden
    // layers, so both solvers share the batched forward pass.
    let svt_network;
    let network = match solver {
        Solver::Svt(op, cfg) => {
            cfg.validate()?;
            svt_network = Theta::init(op, cfg.iterations - 1, cfg.tau, cfg.delta);
            &svt_network
        }
        Solver::Lsvt(theta) => theta,
    };
    let score = |x: &DMatrix<f64>, inst: &LowRankInstance| {
        if x.iter().all(|v| v.is_finite()) {
            frobenius_dist_sq(x, &inst.x) / d2
        } else {
            f64::NAN
        }
    };
    let per_instance: Vec<f64> = split
        .par_chunks(CHUNK)
        .flat_map_iter(|chunk| {
            // Batched when possible; one failing sample sends the chunk down the
            // per-sample path so only that sample is marked.
            let bs: Vec<&DVector<f64>> = chunk.iter().map(|i| &i.b).collect();
            let batched = forward_batch(network, &bs, false).ok().map(|(outs, _)| outs);
            let scores: Vec<f64> = match batched {
                Some(outs) => outs.iter().zip(chunk).map(|(x, inst)| score(x, inst)).collect(),
                None => chunk
                    .iter()
                    .map(|inst| match solver.reconstruct(&inst.b) {
                        Ok(x) => score(&x, inst),
                        Err(_) => f64::NAN,
                    })
                    .collect(),
            };
            scores
        })
        .collect();
    let finite: Vec<f64> = per_instance.iter().copied().filter(|v| v.is_finite()).collect();
    let non_finite = per_instance.len() - finite.len();
    let mse = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(EvalReport {
        mse,
        mean_sq_error: mse * d2,
        per_instance,
        non_finite,
        count: split.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    /// Per-entry MSE of the minibatch that produced this update (`NaN` at step 0).
    pub train_minibatch_mse: f64,
    /// Per-entry validation MSE, `NaN` when this update was not validated.
    pub val_mse: f64,
}

pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("step,train_minibatch_mse,val_mse\n");
    let fmt = |v: f64| if v.is_nan() { String::new() } else { format!("{v:.10e}") };
    for row in history {
        out.push_str(&format!(
            "{},{},{}\n",
            row.step,
            fmt(row.train_minibatch_mse),
            fmt(row.val_mse)
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_theta: Theta,
    pub best_val: f64,
    pub history: Vec<HistoryRow>,
    pub state: TrainState,
    pub stop_reason: StopReason,
    pub epochs: usize,
}

/// Progress callback invoked after every validation.
pub type Progress<'a> = &'a mut dyn FnMut(&HistoryRow, &TrainState);

pub fn train(
    train_split: &[LowRankInstance],
    validation_split: &[LowRankInstance],
    init: Theta,
    cfg: &TrainConfig,
    mut progress: Option<Progress<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    init.validate()?;
    if train_split.is_empty() || validation_split.is_empty() {
        return Err(Error::InvalidArgument(
            "training needs nonempty train and validation splits".into(),
        ));
    }
    let d2 = (init.dim * init.dim) as f64;
    let mut state = TrainState::new(init);
    let initial = evaluate(Solver::Lsvt(&state.theta), validation_split)?.mse;
    if !initial.is_finite() {
        return Err(Error::Diverged {
            update: 0,
            history: vec![],
        });
    }
    state.best_val = initial;
    let mut history = vec![HistoryRow {
        step: 0,
        train_minibatch_mse: f64::NAN,
        val_mse: initial,
    }];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..train_split.len()).collect();
    let mut epochs = 0;
    let stop_reason = 'outer: loop {
        if epochs >= cfg.max_epochs {
            break StopReason::MaxEpochs;
        }
        epochs += 1;
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&LowRankInstance> = idx.iter().map(|&i| &train_split[i]).collect();
            let (loss, grad) = batch_gradient(&state.theta, &batch)?;
            adam_step(&mut state, &grad, cfg.learning_rate)?;
            let mut row = HistoryRow {
                step: state.step,
                train_minibatch_mse: loss / d2,
                val_mse: f64::NAN,
            };
            if state.step % cfg.val_every == 0 {
                let val = evaluate(Solver::Lsvt(&state.theta), validation_split)?;
                row.val_mse = val.mse;
                if !val.mse.is_finite() || val.non_finite > 0 {
                    history.push(row);
                    return Err(Error::Diverged {
                        update: state.step,
                        history,
                    });
                }
                if val.mse < state.best_val * (1.0 - cfg.min_rel_improvement) {
                    state.best_val = val.mse;
                    state.best_theta = state.theta.clone();
                    state.since_improvement = 0;
                } else {
                    state.since_improvement += cfg.val_every;
                }
                if let Some(cb) = progress.as_mut() {
                    cb(&row, &state);
                }
            }
            history.push(row);
            if state.since_improvement >= cfg.patience {
                break 'outer StopReason::Patience;
            }
        }
    };
    Ok(TrainOutcome {
        best_theta: state.best_theta.clone(),
        best_val: state.best_val,
        history,
        state,
        stop_reason,
        epochs,
    })
}
