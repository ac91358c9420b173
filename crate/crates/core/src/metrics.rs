//! Relative error metrics and dataset-level evaluation.
//!
//! Predictions are full rollouts from rest (no teacher forcing); each test
//! trajectory is re-simulated with the trained network and with the linear
//! baseline (zero nonlinearity) and compared against the stored oracle
//! solution over the initial window and the full duration.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gradnet::{GradNetField, GradNetParams};
use crate::solver::{SavSolver, SimOptions, Trajectory};
use crate::spectral::ZeroField;
use crate::train::TrajectoryContext;

/// Relative MSE: sum_n ||pred - target||^2 / sum_n ||target||^2.
pub fn mse_rel(pred: &[DVector<f64>], target: &[DVector<f64>]) -> Result<f64> {
    check_lengths(pred.len(), target.len())?;
    let num: f64 = pred
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    let den: f64 = target.iter().map(|b| b.norm_squared()).sum();
    finish_rel(num, den)
}

/// Relative MAE: sum_n ||pred - target||_1 / sum_n ||target||_1.
pub fn mae_rel(pred: &[DVector<f64>], target: &[DVector<f64>]) -> Result<f64> {
    check_lengths(pred.len(), target.len())?;
    let num: f64 = pred
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b).abs().sum())
        .sum();
    let den: f64 = target.iter().map(|b| b.abs().sum()).sum();
    finish_rel(num, den)
}

/// Scalar-series variant of [`mse_rel`].
pub fn mse_rel_1d(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), target.len())?;
    let num: f64 = pred
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let den: f64 = target.iter().map(|b| b * b).sum();
    finish_rel(num, den)
}

/// Scalar-series variant of [`mae_rel`].
pub fn mae_rel_1d(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), target.len())?;
    let num: f64 = pred.iter().zip(target).map(|(a, b)| (a - b).abs()).sum();
    let den: f64 = target.iter().map(|b| b.abs()).sum();
    finish_rel(num, den)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!(
            "series lengths differ: {a} vs {b}"
        )));
    }
    Ok(())
}

fn finish_rel(num: f64, den: f64) -> Result<f64> {
    if den <= 0.0 {
        return Err(Error::UndefinedMetric(
            "target series has zero energy".into(),
        ));
    }
    Ok(num / den)
}

/// Plain (non-relative) MSE per mode over an initial window of samples.
pub fn per_mode_mse(
    pred: &[DVector<f64>],
    target: &[DVector<f64>],
    window: usize,
) -> Result<DVector<f64>> {
    check_lengths(pred.len(), target.len())?;
    if window == 0 || window > pred.len() {
        return Err(Error::InvalidArgument(format!(
            "window of {window} samples outside series of length {}",
            pred.len()
        )));
    }
    let modes = target[0].len();
    let mut acc = DVector::zeros(modes);
    for n in 0..window {
        for m in 0..modes {
            let d = pred[n][m] - target[n][m];
            acc[m] += d * d;
        }
    }
    Ok(acc / window as f64)
}

/// Number of samples covering `ms` milliseconds at sampling rate `fs`.
pub fn window_samples(fs: f64, ms: f64) -> usize {
    (fs * ms / 1000.0).round() as usize
}

/// Aggregated evaluation of a checkpoint against a dataset.
///
/// All values are means over the trajectories; windows follow the dataset's
/// sampling rates.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mse_rel_q_initial: f64,
    pub mse_rel_q_full: f64,
    pub mse_rel_w_initial: f64,
    pub mse_rel_w_full: f64,
    pub mae_rel_q_initial: f64,
    pub mae_rel_q_full: f64,
    pub mae_rel_w_initial: f64,
    pub mae_rel_w_full: f64,
    /// Same eight metrics for the linear baseline.
    pub linear: LinearBaselineMetrics,
    /// Per-mode MSE over the initial window, model prediction vs target.
    pub per_mode_mse_pred: DVector<f64>,
    /// Per-mode MSE over the initial window, linear solution vs target.
    pub per_mode_mse_linear: DVector<f64>,
    /// Initial window length in milliseconds.
    pub window_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearBaselineMetrics {
    pub mse_rel_q_initial: f64,
    pub mse_rel_q_full: f64,
    pub mse_rel_w_initial: f64,
    pub mse_rel_w_full: f64,
    pub mae_rel_q_initial: f64,
    pub mae_rel_q_full: f64,
    pub mae_rel_w_initial: f64,
    pub mae_rel_w_full: f64,
}

struct TrajectoryMetrics {
    values: [f64; 16],
    per_mode_pred: DVector<f64>,
    per_mode_linear: DVector<f64>,
}

/// Re-simulate one target with a given field from rest (with the auxiliary
/// variable initialised consistently with that field) and return the states.
fn rollout(
    ctx: &TrajectoryContext,
    field: &dyn crate::spectral::PotentialField,
    samples: usize,
) -> Result<Trajectory> {
    let solver = SavSolver::new(&ctx.ops, field, ctx.cfg, ctx.nu, ctx.exc)?;
    solver.simulate_with(&solver.rest_state(), SimOptions::dense(samples))
}

fn eval_one(
    target: &Trajectory,
    ctx: &TrajectoryContext,
    params: &GradNetParams,
    window_ms: f64,
) -> Result<TrajectoryMetrics> {
    let samples = target.samples();
    let window = window_samples(target.fs, window_ms).min(samples);
    if window == 0 {
        return Err(Error::InvalidArgument(
            "evaluation window shorter than one sample".into(),
        ));
    }
    let pred = rollout(ctx, &GradNetField::new(params), samples)?;
    let linear = rollout(ctx, &ZeroField, samples)?;

    let metrics_for = |sim: &Trajectory| -> Result<[f64; 8]> {
        Ok([
            mse_rel(&sim.q[..window], &target.q[..window])?,
            mse_rel(&sim.q, &target.q)?,
            mse_rel_1d(&sim.w[..window], &target.w[..window])?,
            mse_rel_1d(&sim.w, &target.w)?,
            mae_rel(&sim.q[..window], &target.q[..window])?,
            mae_rel(&sim.q, &target.q)?,
            mae_rel_1d(&sim.w[..window], &target.w[..window])?,
            mae_rel_1d(&sim.w, &target.w)?,
        ])
    };
    let model = metrics_for(&pred)?;
    let base = metrics_for(&linear)?;
    let mut values = [0.0; 16];
    values[..8].copy_from_slice(&model);
    values[8..].copy_from_slice(&base);
    Ok(TrajectoryMetrics {
        values,
        per_mode_pred: per_mode_mse(&pred.q, &target.q, window)?,
        per_mode_linear: per_mode_mse(&linear.q, &target.q, window)?,
    })
}

/// Evaluate a checkpoint on a dataset: full rollouts, metrics averaged over
/// trajectories, linear baseline alongside.
pub fn evaluate(dataset: &Dataset, params: &GradNetParams, window_ms: f64) -> Result<MetricsReport> {
    if dataset.trajectories.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if params.modes() != dataset.modes {
        return Err(Error::DimensionMismatch(format!(
            "checkpoint has {} modes, dataset {}",
            params.modes(),
            dataset.modes
        )));
    }
    let contexts: Vec<TrajectoryContext> = dataset
        .draws
        .iter()
        .zip(&dataset.trajectories)
        .map(|(draw, traj)| {
            TrajectoryContext::new(
                &draw.scaled_params(dataset.modes),
                draw.excitation(),
                traj.fs,
                1e-12,
                traj.lambda0,
            )
        })
        .collect::<Result<_>>()?;

    let per_traj: Vec<Result<TrajectoryMetrics>> = dataset
        .trajectories
        .par_iter()
        .zip(contexts.par_iter())
        .map(|(target, ctx)| eval_one(target, ctx, params, window_ms))
        .collect();
    let per_traj = per_traj.into_iter().collect::<Result<Vec<_>>>()?;

    let count = per_traj.len() as f64;
    let mut sums = [0.0; 16];
    let mut per_mode_pred = DVector::zeros(dataset.modes);
    let mut per_mode_linear = DVector::zeros(dataset.modes);
    for tm in &per_traj {
        for (acc, v) in sums.iter_mut().zip(tm.values) {
            *acc += v;
        }
        per_mode_pred += &tm.per_mode_pred;
        per_mode_linear += &tm.per_mode_linear;
    }
    for acc in sums.iter_mut() {
        *acc /= count;
    }
    per_mode_pred /= count;
    per_mode_linear /= count;

    Ok(MetricsReport {
        mse_rel_q_initial: sums[0],
        mse_rel_q_full: sums[1],
        mse_rel_w_initial: sums[2],
        mse_rel_w_full: sums[3],
        mae_rel_q_initial: sums[4],
        mae_rel_q_full: sums[5],
        mae_rel_w_initial: sums[6],
        mae_rel_w_full: sums[7],
        linear: LinearBaselineMetrics {
            mse_rel_q_initial: sums[8],
            mse_rel_q_full: sums[9],
            mse_rel_w_initial: sums[10],
            mse_rel_w_full: sums[11],
            mae_rel_q_initial: sums[12],
            mae_rel_q_full: sums[13],
            mae_rel_w_initial: sums[14],
            mae_rel_w_full: sums[15],
        },
        per_mode_mse_pred: per_mode_pred,
        per_mode_mse_linear: per_mode_linear,
        window_ms,
    })
}

impl MetricsReport {
    /// Fraction of modes where the model beats the linear baseline.
    pub fn modes_beating_linear(&self) -> f64 {
        let total = self.per_mode_mse_pred.len();
        let wins = (0..total)
            .filter(|&m| self.per_mode_mse_pred[m] <= self.per_mode_mse_linear[m])
            .count();
        wins as f64 / total as f64
    }

    /// Machine-readable summary: metric,signal,window,model,linear.
    pub fn to_csv(&self) -> String {
        let rows = [
            ("mse_rel", "q", "initial", self.mse_rel_q_initial, self.linear.mse_rel_q_initial),
            ("mse_rel", "q", "full", self.mse_rel_q_full, self.linear.mse_rel_q_full),
            ("mse_rel", "w", "initial", self.mse_rel_w_initial, self.linear.mse_rel_w_initial),
            ("mse_rel", "w", "full", self.mse_rel_w_full, self.linear.mse_rel_w_full),
            ("mae_rel", "q", "initial", self.mae_rel_q_initial, self.linear.mae_rel_q_initial),
            ("mae_rel", "q", "full", self.mae_rel_q_full, self.linear.mae_rel_q_full),
            ("mae_rel", "w", "initial", self.mae_rel_w_initial, self.linear.mae_rel_w_initial),
            ("mae_rel", "w", "full", self.mae_rel_w_full, self.linear.mae_rel_w_full),
        ];
        let mut out = String::from("metric,signal,window,model,linear\n");
        for (metric, signal, window, model, linear) in rows {
            out.push_str(&format!("{metric},{signal},{window},{model:e},{linear:e}\n"));
        }
        out
    }

    /// Per-mode CSV: mode,predicted,linear.
    pub fn per_mode_csv(&self) -> String {
        let mut out = String::from("mode,predicted,linear\n");
        for m in 0..self.per_mode_mse_pred.len() {
            out.push_str(&format!(
                "{},{:e},{:e}\n",
                m + 1,
                self.per_mode_mse_pred[m],
                self.per_mode_mse_linear[m]
            ));
        }
        out
    }
}
