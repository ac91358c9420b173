//! Teacher-forced training of the gradient network inside the SAV solver.
//!
//! Target trajectories are split into short segments started from true
//! initial conditions; each segment is rolled forward with the solver while
//! recording tapes, and the loss gradient is propagated back analytically
//! through every stage of the update: the half-steps, the Sherman-Morrison
//! velocity solve (via the adjoint of the solved linear system), the
//! dependence of the coupling vector on q through both the network force and
//! its potential, the psi update, and the consistent initialisation
//! psi_0 = sqrt(2 V(q_0) + eps). The drift-control term is evaluated in the
//! forward pass but treated as a constant in reverse: no adjoint flows
//! through it.

use std::time::Instant;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gradnet::{
    self, force_potential_tape, potential_param_grads_into, vjp_input, vjp_params_into,
    GradNetField, GradNetGrads, GradNetParams, GradNetTape,
};
use crate::solver::{
    complete_step, g_mod, quadratise, sherman_morrison_apply, SolverConfig, SolverState,
    Trajectory,
};
use crate::string::{
    build_modal_operators, check_stability, excitation_force, mode_shape, ExcitationParams,
    ModalOperators, ScaledStringParams,
};

/// A contiguous chunk of trajectory states used as one teacher-forced
/// training unit. The first state of the chunk provides the initial
/// conditions; all states in the chunk are the targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    /// Index of the first state in the source trajectory.
    pub start: usize,
    /// Number of states covered (solver steps = len - 1).
    pub len: usize,
}

/// Split a trajectory into segments of about `segment_ms` milliseconds.
///
/// The chunk size is round(fs * segment_ms / 1000) states; the last segment
/// may be shorter. Concatenating the segments' target states reproduces the
/// trajectory exactly.
pub fn segment_trajectory(traj: &Trajectory, segment_ms: f64) -> Vec<Segment> {
    let n = traj.state_count();
    let chunk = ((traj.fs * segment_ms / 1000.0).round() as usize).max(1);
    let mut segments = Vec::with_capacity(n.div_ceil(chunk));
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        segments.push(Segment { start, len });
        start += len;
    }
    segments
}

/// psi_0 = sqrt(2 V_theta(q_0) + eps) from the model's own potential.
pub fn consistent_psi_init(q0: &DVector<f64>, params: &GradNetParams, eps: f64) -> f64 {
    quadratise(
        gradnet::potential(params, q0).expect("dimension checked by caller"),
        eps,
    )
}

/// Mean squared error over state pairs, normalised by 2M per state; the
/// auxiliary variable is excluded.
pub fn mse_loss(predicted: &[SolverState], target: &[SolverState]) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(Error::DimensionMismatch(format!(
            "state series lengths differ: {} vs {}",
            predicted.len(),
            target.len()
        )));
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let modes = predicted[0].q.len();
    let mut acc = 0.0;
    for (a, b) in predicted.iter().zip(target) {
        acc += (&a.q - &b.q).norm_squared() + (&a.p - &b.p).norm_squared();
    }
    Ok(acc / (2.0 * modes as f64 * predicted.len() as f64))
}

/// Per-trajectory solver context for training and evaluation.
#[derive(Debug, Clone)]
pub struct TrajectoryContext {
    pub ops: ModalOperators,
    pub nu: f64,
    pub exc: ExcitationParams,
    pub phi_e: DVector<f64>,
    pub cfg: SolverConfig,
}

impl TrajectoryContext {
    pub fn new(
        s: &ScaledStringParams,
        exc: ExcitationParams,
        fs: f64,
        eps: f64,
        lambda0: f64,
    ) -> Result<Self> {
        let ops = build_modal_operators(s)?;
        let cfg = SolverConfig::from_sample_rate(fs)
            .with_eps(eps)
            .with_lambda0(lambda0);
        let report = check_stability(&ops, cfg.k);
        if !report.stable {
            return Err(Error::Unstable {
                omega_max: ops.omega_max(),
                limit: 2.0 / cfg.k,
            });
        }
        let phi_e = mode_shape(exc.xe, s.modes)?;
        Ok(Self {
            ops,
            nu: s.nu,
            exc,
            phi_e,
            cfg,
        })
    }
}

/// Everything recorded at one solver step for the reverse pass.
struct StepRecord {
    /// GradNet tape at the half-grid displacement (tape.q = q^{n+1/2}).
    tape: GradNetTape,
    /// Network force at the half-grid displacement.
    fh: DVector<f64>,
    /// psi_half = sqrt(2 V(q^{n+1/2}) + eps).
    r: f64,
    /// Assembled coupling vector g = g_std + g_mod.
    g: DVector<f64>,
    /// The control term alone (kept for gradient-check replays).
    gm: DVector<f64>,
}

struct SegmentForward {
    states: Vec<SolverState>,
    records: Vec<StepRecord>,
    init_tape: GradNetTape,
    psi0: f64,
    loss: f64,
}

fn forward_segment(
    traj: &Trajectory,
    seg: Segment,
    params: &GradNetParams,
    ctx: &TrajectoryContext,
    gmod_replay: Option<&[DVector<f64>]>,
) -> Result<SegmentForward> {
    debug_assert_eq!(traj.state_stride, 1, "training requires dense states");
    let cfg = &ctx.cfg;
    let k = cfg.k;
    let modes = params.modes();
    let field = GradNetField::new(params);

    let q0 = &traj.q[seg.start];
    let p0 = &traj.p[seg.start];
    let (_, v0, init_tape) = force_potential_tape(params, q0)?;
    let psi0 = quadratise(v0, cfg.eps);

    let mut states = Vec::with_capacity(seg.len);
    states.push(SolverState {
        q: q0.clone(),
        p: p0.clone(),
        psi: psi0,
    });
    let mut records = Vec::with_capacity(seg.len.saturating_sub(1));
    let mut loss_acc = 0.0;

    for j in 1..seg.len {
        let prev = &states[j - 1];
        let q_half = &prev.q + &prev.p * (0.5 * k);
        let (fh, vh, tape) = force_potential_tape(params, &q_half)?;
        let gm = match gmod_replay {
            Some(seq) => seq[j - 1].clone(),
            None => g_mod(&prev.q, &prev.p, prev.psi, &field, cfg),
        };
        let t_half = (seg.start as f64 + j as f64 - 0.5) * k;
        let fe = excitation_force(t_half, &ctx.exc);
        let (next, g, r) = complete_step(
            &q_half, &prev.p, prev.psi, &fh, vh, &gm, &ctx.ops, ctx.nu, cfg, &ctx.phi_e, fe,
        );
        if !next.is_finite() {
            return Err(Error::Diverged {
                step: seg.start + j,
            });
        }
        let target_q = &traj.q[seg.start + j];
        let target_p = &traj.p[seg.start + j];
        loss_acc += (&next.q - target_q).norm_squared() + (&next.p - target_p).norm_squared();
        records.push(StepRecord { tape, fh, r, g, gm });
        states.push(next);
    }

    let loss = loss_acc / (2.0 * modes as f64 * seg.len as f64);
    Ok(SegmentForward {
        states,
        records,
        init_tape,
        psi0,
        loss,
    })
}

/// Teacher-forced segment loss (forward only).
pub fn segment_loss(
    traj: &Trajectory,
    seg: Segment,
    params: &GradNetParams,
    ctx: &TrajectoryContext,
) -> Result<f64> {
    Ok(forward_segment(traj, seg, params, ctx, None)?.loss)
}

/// The control-term vectors produced along a segment forward pass, for
/// gradient checks that must freeze them.
pub fn segment_gmod_sequence(
    traj: &Trajectory,
    seg: Segment,
    params: &GradNetParams,
    ctx: &TrajectoryContext,
) -> Result<Vec<DVector<f64>>> {
    let fwd = forward_segment(traj, seg, params, ctx, None)?;
    Ok(fwd.records.into_iter().map(|r| r.gm).collect())
}

/// Segment loss with the control-term vectors replaced by a recorded
/// sequence. Differentiating this function by finite differences matches the
/// detachment semantics of the reverse pass.
pub fn segment_loss_frozen_gmod(
    traj: &Trajectory,
    seg: Segment,
    params: &GradNetParams,
    ctx: &TrajectoryContext,
    gmods: &[DVector<f64>],
) -> Result<f64> {
    Ok(forward_segment(traj, seg, params, ctx, Some(gmods))?.loss)
}

/// Run a segment forward and propagate the loss adjoints back through every
/// solver stage, returning the exact gradients of the segment loss with
/// respect to all network parameters. The control term is a constant in
/// reverse.
pub fn forward_backward_segment(
    traj: &Trajectory,
    seg: Segment,
    params: &GradNetParams,
    ctx: &TrajectoryContext,
) -> Result<(f64, GradNetGrads)> {
    let fwd = forward_segment(traj, seg, params, ctx, None)?;
    let cfg = &ctx.cfg;
    let k = cfg.k;
    let nu2 = ctx.nu * ctx.nu;
    let c = 0.25 * k * k * nu2;
    let modes = params.modes();
    let loss_scale = 1.0 / (modes as f64 * seg.len as f64);

    let mut grads = GradNetGrads::zeros_like(params);
    let mut q_bar = DVector::zeros(modes);
    let mut p_bar = DVector::zeros(modes);
    let mut psi_bar = 0.0f64;

    for j in (1..seg.len).rev() {
        let rec = &fwd.records[j - 1];
        let prev = &fwd.states[j - 1];
        let next = &fwd.states[j];

        // Loss contribution at this step's output.
        q_bar += (&next.q - &traj.q[seg.start + j]) * loss_scale;
        p_bar += (&next.p - &traj.p[seg.start + j]) * loss_scale;

        let g = &rec.g;
        // q^{n+1} = q^{n+1/2} + (k/2) p^{n+1} and the psi update both feed
        // the velocity adjoint before the solve adjoint.
        let mut qh_bar = q_bar.clone();
        let p_next_bar = &p_bar + &q_bar * (0.5 * k) + g * (0.5 * k * psi_bar);

        // psi^{n+1} = psi^n + k g . (p + p')/2
        let mut psi_prev_bar = psi_bar;
        let mut g_bar = (&prev.p + &next.p) * (0.5 * k * psi_bar);
        let mut p_prev_bar = g * (0.5 * k * psi_bar);

        // Adjoint of the Sherman-Morrison solve: K p' = rhs with symmetric
        // K = I + k Sigma + c g g^T. lambda = K^{-1} pbar', rhsbar = lambda,
        // Kbar = -lambda p'^T.
        let lambda = sherman_morrison_apply(&ctx.ops.sigma, c, g, &p_next_bar, k);
        if c != 0.0 {
            let g_dot_pnext = g.dot(&next.p);
            let lambda_dot_g = lambda.dot(g);
            g_bar += &lambda * (-c * g_dot_pnext);
            g_bar += &next.p * (-c * lambda_dot_g);
        }

        // rhs = (I - k Sigma) p - c g (g.p) - k Omega^2 q_half
        //       - k nu^2 g psi + k Phi_e fe
        let b_bar = &lambda;
        let g_dot_b = g.dot(b_bar);
        for i in 0..modes {
            p_prev_bar[i] += (1.0 - k * ctx.ops.sigma[i]) * b_bar[i];
            qh_bar[i] += -k * ctx.ops.omega2[i] * b_bar[i];
        }
        if c != 0.0 {
            let g_dot_p = g.dot(&prev.p);
            for i in 0..modes {
                p_prev_bar[i] += -c * g_dot_b * g[i];
                g_bar[i] += -c * (g_dot_p * b_bar[i] + g_dot_b * prev.p[i]);
            }
        }
        g_bar += b_bar * (-k * nu2 * prev.psi);
        psi_prev_bar += -k * nu2 * g_dot_b;

        // g = -f / psi_half + g_mod with g_mod detached.
        let r = rec.r;
        let fh_bar = -&g_bar / r;
        let r_bar = rec.fh.dot(&g_bar) / (r * r);
        let vh_bar = r_bar / r;

        // Network evaluations at the half-grid displacement.
        let q_half = &rec.tape.q;
        qh_bar += vjp_input(params, q_half, &rec.tape, &fh_bar);
        vjp_params_into(params, q_half, &rec.tape, &fh_bar, 1.0, &mut grads);
        if vh_bar != 0.0 {
            qh_bar += &rec.fh * (-vh_bar);
            potential_param_grads_into(params, q_half, &rec.tape, vh_bar, &mut grads);
        }

        // q^{n+1/2} = q^n + (k/2) p^n
        p_prev_bar += &qh_bar * (0.5 * k);
        q_bar = qh_bar;
        p_bar = p_prev_bar;
        psi_bar = psi_prev_bar;
    }

    // Consistent initialisation psi_0 = sqrt(2 V(q_0) + eps) depends on the
    // parameters through the potential.
    if psi_bar != 0.0 {
        let q0 = &traj.q[seg.start];
        potential_param_grads_into(params, q0, &fwd.init_tape, psi_bar / fwd.psi0, &mut grads);
    }

    Ok((fwd.loss, grads))
}

/// Central finite differences of the segment loss over every parameter.
///
/// With `frozen_gmod` the control-term vectors are held at the supplied
/// values, matching the reverse pass's detachment semantics.
pub fn finite_difference_param_grads(
    traj: &Trajectory,
    seg: Segment,
    params: &GradNetParams,
    ctx: &TrajectoryContext,
    step: f64,
    frozen_gmod: Option<&[DVector<f64>]>,
) -> Result<GradNetGrads> {
    let eval = |p: &GradNetParams| -> Result<f64> {
        match frozen_gmod {
            Some(seq) => segment_loss_frozen_gmod(traj, seg, p, ctx, seq),
            None => segment_loss(traj, seg, p, ctx),
        }
    };
    let mut grads = GradNetGrads::zeros_like(params);
    let (h, m) = (params.hidden_dim(), params.modes());
    for i in 0..h {
        for j in 0..m {
            let mut pp = params.clone();
            let mut pm = params.clone();
            pp.w[(i, j)] += step;
            pm.w[(i, j)] -= step;
            grads.w[(i, j)] = (eval(&pp)? - eval(&pm)?) / (2.0 * step);
        }
    }
    for i in 0..h {
        let mut pp = params.clone();
        let mut pm = params.clone();
        pp.b[i] += step;
        pm.b[i] -= step;
        grads.b[i] = (eval(&pp)? - eval(&pm)?) / (2.0 * step);

        let mut pp = params.clone();
        let mut pm = params.clone();
        pp.log_alpha[i] += step;
        pm.log_alpha[i] -= step;
        grads.log_alpha[i] = (eval(&pp)? - eval(&pm)?) / (2.0 * step);

        let mut pp = params.clone();
        let mut pm = params.clone();
        pp.log_beta[i] += step;
        pm.log_beta[i] -= step;
        grads.log_beta[i] = (eval(&pp)? - eval(&pm)?) / (2.0 * step);
    }
    Ok(grads)
}

/// Adam hyperparameters; defaults are the optimiser's canonical values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators mirroring the parameter shapes.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: GradNetGrads,
    pub v: GradNetGrads,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(params: &GradNetParams, hyper: AdamHyper) -> Self {
        Self {
            m: GradNetGrads::zeros_like(params),
            v: GradNetGrads::zeros_like(params),
            step: 0,
            hyper,
        }
    }
}

fn adam_update_block(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    hyper: &AdamHyper,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
}

/// Standard Adam step with bias correction.
pub fn adam_step(params: &mut GradNetParams, grads: &GradNetGrads, state: &mut AdamState) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.hyper.beta1.powi(t);
    let bc2 = 1.0 - state.hyper.beta2.powi(t);
    let hyper = state.hyper;
    adam_update_block(
        params.w.as_mut_slice(),
        grads.w.as_slice(),
        state.m.w.as_mut_slice(),
        state.v.w.as_mut_slice(),
        &hyper,
        bc1,
        bc2,
    );
    adam_update_block(
        params.b.as_mut_slice(),
        grads.b.as_slice(),
        state.m.b.as_mut_slice(),
        state.v.b.as_mut_slice(),
        &hyper,
        bc1,
        bc2,
    );
    adam_update_block(
        params.log_alpha.as_mut_slice(),
        grads.log_alpha.as_slice(),
        state.m.log_alpha.as_mut_slice(),
        state.v.log_alpha.as_mut_slice(),
        &hyper,
        bc1,
        bc2,
    );
    adam_update_block(
        params.log_beta.as_mut_slice(),
        grads.log_beta.as_slice(),
        state.m.log_beta.as_mut_slice(),
        state.v.log_beta.as_mut_slice(),
        &hyper,
        bc1,
        bc2,
    );
}

/// Training hyperparameters. Desk-scale defaults; the paper-scale settings
/// (2000 epochs, H = 1000) are reachable through configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Teacher-forcing segment length in milliseconds.
    pub segment_ms: f64,
    /// Validate every this many epochs (and always on the final one).
    pub val_period: usize,
    pub seed: u64,
    pub hidden_dim: usize,
    pub neg_slope: f64,
    /// Drift-control gain active in the forward pass (detached in reverse).
    pub lambda0: f64,
    /// SAV gauge constant.
    pub eps: f64,
    pub adam: AdamHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            segment_ms: 1.0,
            val_period: 10,
            seed: 0,
            hidden_dim: 200,
            neg_slope: 0.01,
            lambda0: 1.0,
            eps: 1e-12,
            adam: AdamHyper::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.batch_size == 0
            || self.val_period == 0
            || self.hidden_dim == 0
            || !(self.segment_ms > 0.0)
        {
            return Err(Error::InvalidArgument(
                "training configuration fields must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub wall_seconds: f64,
    pub diverged_segments: usize,
}

/// Result of a training run: the checkpoint with the lowest validation loss
/// plus the per-epoch log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: GradNetParams,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

fn build_contexts(dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<TrajectoryContext>> {
    dataset
        .draws
        .iter()
        .zip(&dataset.trajectories)
        .map(|(draw, traj)| {
            if traj.state_stride != 1 {
                return Err(Error::InvalidArgument(
                    "training requires dense state recording (stride 1)".into(),
                ));
            }
            TrajectoryContext::new(
                &draw.scaled_params(traj.modes()),
                draw.excitation(),
                traj.fs,
                cfg.eps,
                cfg.lambda0,
            )
        })
        .collect()
}

fn collect_segments(dataset: &Dataset, segment_ms: f64) -> Result<Vec<(usize, Segment)>> {
    let mut out = Vec::new();
    for (idx, traj) in dataset.trajectories.iter().enumerate() {
        let segs = segment_trajectory(traj, segment_ms);
        if segs.iter().all(|s| s.len < 2) {
            return Err(Error::InvalidArgument(
                "segments must span at least two states; raise segment_ms or fs".into(),
            ));
        }
        out.extend(segs.into_iter().filter(|s| s.len >= 2).map(|s| (idx, s)));
    }
    Ok(out)
}

struct EvalOutcome {
    mean_loss: f64,
    diverged: usize,
}

fn validation_loss(
    dataset: &Dataset,
    contexts: &[TrajectoryContext],
    segments: &[(usize, Segment)],
    params: &GradNetParams,
) -> Result<EvalOutcome> {
    let results: Vec<Result<f64>> = segments
        .par_iter()
        .map(|&(idx, seg)| segment_loss(&dataset.trajectories[idx], seg, params, &contexts[idx]))
        .collect();
    let mut acc = 0.0;
    let mut count = 0usize;
    let mut diverged = 0usize;
    for r in results {
        match r {
            Ok(loss) => {
                acc += loss;
                count += 1;
            }
            Err(Error::Diverged { .. }) => diverged += 1,
            Err(e) => return Err(e),
        }
    }
    if count == 0 {
        return Err(Error::TrainingAborted(
            "all validation segments diverged".into(),
        ));
    }
    Ok(EvalOutcome {
        mean_loss: acc / count as f64,
        diverged,
    })
}

/// Epoch loop over shuffled teacher-forced segments with batch-averaged
/// gradients; returns the checkpoint with the lowest validation loss.
///
/// Deterministic for a fixed seed: segment order comes from a seeded RNG and
/// all reductions run in a fixed order regardless of worker count.
pub fn train(dataset: &Dataset, val_dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.trajectories.is_empty() || val_dataset.trajectories.is_empty() {
        return Err(Error::InvalidArgument(
            "training and validation datasets must be non-empty".into(),
        ));
    }
    let modes = dataset.trajectories[0].modes();
    let contexts = build_contexts(dataset, cfg)?;
    let val_contexts = build_contexts(val_dataset, cfg)?;
    let segments = collect_segments(dataset, cfg.segment_ms)?;
    let val_segments = collect_segments(val_dataset, cfg.segment_ms)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = gradnet::init(modes, cfg.hidden_dim, cfg.neg_slope, &mut rng);
    let mut adam = AdamState::new(&params, cfg.adam);

    let mut order: Vec<usize> = (0..segments.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, GradNetParams)> = None;

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut diverged = 0usize;
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, GradNetGrads)>> = batch
                .par_iter()
                .map(|&i| {
                    let (idx, seg) = segments[i];
                    forward_backward_segment(
                        &dataset.trajectories[idx],
                        seg,
                        &params,
                        &contexts[idx],
                    )
                })
                .collect();
            let mut batch_grads = GradNetGrads::zeros_like(&params);
            let mut ok = 0usize;
            for r in results {
                match r {
                    Ok((loss, grads)) => {
                        batch_grads.add_assign(&grads);
                        loss_sum += loss;
                        loss_count += 1;
                        ok += 1;
                    }
                    Err(Error::Diverged { .. }) => diverged += 1,
                    Err(e) => return Err(e),
                }
            }
            if ok > 0 {
                batch_grads.scale(1.0 / ok as f64);
                adam_step(&mut params, &batch_grads, &mut adam);
            }
        }

        if loss_count == 0 {
            return Err(Error::TrainingAborted(format!(
                "all {} segments diverged in epoch {epoch}",
                segments.len()
            )));
        }
        let train_loss = loss_sum / loss_count as f64;

        let val_loss = if epoch % cfg.val_period == 0 || epoch == cfg.epochs {
            let outcome = validation_loss(val_dataset, &val_contexts, &val_segments, &params)?;
            diverged += outcome.diverged;
            let better = best
                .as_ref()
                .map_or(true, |(best_loss, _, _)| outcome.mean_loss < *best_loss);
            if better {
                best = Some((outcome.mean_loss, epoch, params.clone()));
            }
            Some(outcome.mean_loss)
        } else {
            None
        };

        log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            wall_seconds: t0.elapsed().as_secs_f64(),
            diverged_segments: diverged,
        });
    }

    let (best_val_loss, best_epoch, best_params) =
        best.expect("final epoch always validates");
    Ok(TrainOutcome {
        params: best_params,
        best_val_loss,
        best_epoch,
        log,
    })
}

/// Serialise the training log as CSV. `wall_seconds` is the only
/// non-deterministic column.
pub fn log_to_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,wall_seconds,diverged_segments\n");
    for rec in log {
        let val = rec
            .val_loss
            .map_or(String::new(), |v| format!("{v:e}"));
        out.push_str(&format!(
            "{},{:e},{},{:.3},{}\n",
            rec.epoch, rec.train_loss, val, rec.wall_seconds, rec.diverged_segments
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{SavSolver, SimOptions};
    use crate::spectral::{PotentialField, SpectralNonlinearity};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn tiny_string(modes: usize, nu: f64) -> ScaledStringParams {
        ScaledStringParams {
            gamma: 140.0,
            kappa: 1.02,
            nu,
            sigma0: 2.0,
            sigma1_hat: 2e-4,
            modes,
        }
    }

    fn tiny_exc() -> ExcitationParams {
        ExcitationParams {
            famp: 2.5e4,
            te: 1e-3,
            xe: 0.31,
            xo: 0.67,
        }
    }

    fn oracle_trajectory(modes: usize, nu: f64, fs: f64, samples: usize) -> Trajectory {
        let s = tiny_string(modes, nu);
        let ops = build_modal_operators(&s).unwrap();
        let field = SpectralNonlinearity::new(modes);
        let cfg = SolverConfig::from_sample_rate(fs);
        let solver = SavSolver::new(&ops, &field, cfg, nu, tiny_exc()).unwrap();
        solver
            .simulate_with(&SolverState::rest(modes, cfg.eps), SimOptions::dense(samples))
            .unwrap()
    }

    fn random_params(modes: usize, hidden: usize, seed: u64) -> GradNetParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        gradnet::init(modes, hidden, 0.01, &mut rng)
    }

    #[test]
    fn segmentation_partition_arithmetic() {
        let traj = oracle_trajectory(3, 130.0, 32_000.0, 100);
        let segs = segment_trajectory(&traj, 1.0);
        assert_eq!(
            segs,
            vec![
                Segment { start: 0, len: 32 },
                Segment { start: 32, len: 32 },
                Segment { start: 64, len: 32 },
                Segment { start: 96, len: 4 },
            ]
        );
        // Concatenated targets reproduce the trajectory exactly.
        let total: usize = segs.iter().map(|s| s.len).sum();
        assert_eq!(total, 100);
        let mut covered = Vec::new();
        for s in &segs {
            covered.extend(s.start..s.start + s.len);
        }
        assert_eq!(covered, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn consistent_psi_init_is_by_construction() {
        let params = random_params(4, 6, 1);
        let q0 = DVector::from_vec(vec![1e-3, -2e-3, 5e-4, 0.0]);
        let eps = 1e-12;
        let psi0 = consistent_psi_init(&q0, &params, eps);
        let v = gradnet::potential(&params, &q0).unwrap();
        assert_eq!(psi0, (2.0 * v + eps).sqrt());
        // No coupling to the oracle potential in this path.
        let oracle = SpectralNonlinearity::new(4);
        let psi_oracle = quadratise(oracle.potential(&q0), eps);
        assert_ne!(psi0, psi_oracle);
        // Zero input with zero bias collapses to sqrt(eps).
        let mut p0 = params.clone();
        p0.b.fill(0.0);
        assert_eq!(consistent_psi_init(&DVector::zeros(4), &p0, eps), eps.sqrt());
    }

    #[test]
    fn mse_loss_normalisation_and_psi_exclusion() {
        let m = 3;
        let mk = |v: f64, psi: f64| SolverState {
            q: DVector::from_element(m, v),
            p: DVector::from_element(m, v),
            psi,
        };
        // Identical series.
        assert_eq!(
            mse_loss(&[mk(0.5, 1.0)], &[mk(0.5, 9.0)]).unwrap(),
            0.0,
            "psi must not enter the loss"
        );
        // Single state with all-ones difference: (2M * 1) / (2M * 1) = 1.
        assert_eq!(mse_loss(&[mk(1.0, 0.0)], &[mk(0.0, 0.0)]).unwrap(), 1.0);
        // Independent recomputation on random data.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<SolverState> = (0..5)
            .map(|_| mk(rng.gen_range(-1.0..1.0), rng.gen()))
            .collect();
        let b: Vec<SolverState> = (0..5)
            .map(|_| mk(rng.gen_range(-1.0..1.0), rng.gen()))
            .collect();
        let direct: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (&x.q - &y.q).norm_squared() + (&x.p - &y.p).norm_squared())
            .sum::<f64>()
            / (2.0 * m as f64 * 5.0);
        assert_relative_eq!(
            mse_loss(&a, &b).unwrap(),
            direct,
            max_relative = 1e-14
        );
        // Length mismatch errors.
        assert!(mse_loss(&a[..2], &b).is_err());
    }

    #[test]
    fn training_forward_matches_solver_bitwise() {
        // The teacher-forced forward pass and the plain solver must advance
        // states identically.
        let modes = 4;
        let fs = 32_000.0;
        let traj = oracle_trajectory(modes, 130.0, fs, 40);
        let params = random_params(modes, 6, 3);
        let s = tiny_string(modes, 130.0);
        let ctx = TrajectoryContext::new(&s, tiny_exc(), fs, 1e-12, 1.0).unwrap();
        let seg = Segment { start: 8, len: 12 };
        let fwd = forward_segment(&traj, seg, &params, &ctx, None).unwrap();

        let ops = build_modal_operators(&s).unwrap();
        let field = GradNetField::new(&params);
        let solver = SavSolver::new(&ops, &field, ctx.cfg, s.nu, tiny_exc()).unwrap();
        let mut state = SolverState {
            q: traj.q[8].clone(),
            p: traj.p[8].clone(),
            psi: consistent_psi_init(&traj.q[8], &params, 1e-12),
        };
        for j in 1..seg.len {
            let t_half = (seg.start as f64 + j as f64 - 0.5) * ctx.cfg.k;
            let fe = excitation_force(t_half, &tiny_exc());
            state = solver.step(&state, fe).unwrap();
            assert_eq!(state.q, fwd.states[j].q, "q diverged at step {j}");
            assert_eq!(state.p, fwd.states[j].p, "p diverged at step {j}");
            assert_eq!(state.psi, fwd.states[j].psi, "psi diverged at step {j}");
        }
    }

    #[test]
    fn gradients_vanish_when_nu_is_zero() {
        let modes = 4;
        let fs = 32_000.0;
        let traj = oracle_trajectory(modes, 130.0, fs, 20);
        let params = random_params(modes, 6, 4);
        let s = tiny_string(modes, 0.0);
        let ctx = TrajectoryContext::new(&s, tiny_exc(), fs, 1e-12, 1.0).unwrap();
        let seg = Segment { start: 0, len: 9 };
        let (loss, grads) = forward_backward_segment(&traj, seg, &params, &ctx).unwrap();
        assert!(loss > 0.0, "targets are nonlinear, loss must be positive");
        assert_eq!(grads.amax(), 0.0, "nu = 0 must zero every gradient");
    }

    #[test]
    fn duplicated_segment_doubles_accumulated_gradients() {
        let modes = 4;
        let fs = 32_000.0;
        let traj = oracle_trajectory(modes, 130.0, fs, 20);
        let params = random_params(modes, 6, 5);
        let s = tiny_string(modes, 130.0);
        let ctx = TrajectoryContext::new(&s, tiny_exc(), fs, 1e-12, 1.0).unwrap();
        let seg = Segment { start: 0, len: 9 };
        let (_, grads) = forward_backward_segment(&traj, seg, &params, &ctx).unwrap();
        let mut acc = GradNetGrads::zeros_like(&params);
        acc.add_assign(&grads);
        acc.add_assign(&grads);
        let mut doubled = grads.clone();
        doubled.scale(2.0);
        assert_eq!(acc, doubled);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut params = random_params(3, 4, 6);
        let before = params.clone();
        let mut state = AdamState::new(&params, AdamHyper::default());
        let zeros = GradNetGrads::zeros_like(&params);
        adam_step(&mut params, &zeros, &mut state);
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_is_signlike() {
        let mut params = random_params(2, 3, 7);
        let hyper = AdamHyper::default();
        let mut state = AdamState::new(&params, hyper);
        let mut grads = GradNetGrads::zeros_like(&params);
        grads.w[(0, 0)] = 0.3;
        grads.w[(1, 1)] = -4.0;
        let before = params.clone();
        adam_step(&mut params, &grads, &mut state);
        // First bias-corrected step moves by about -lr * sign(g).
        assert_relative_eq!(
            params.w[(0, 0)] - before.w[(0, 0)],
            -hyper.lr,
            max_relative = 1e-6
        );
        assert_relative_eq!(
            params.w[(1, 1)] - before.w[(1, 1)],
            hyper.lr,
            max_relative = 1e-6
        );
        assert_eq!(params.w[(0, 1)], before.w[(0, 1)]);
    }

    #[test]
    fn adam_matches_scalar_reference() {
        // Independent scalar re-implementation driven by the same gradient
        // sequence.
        let mut params = random_params(1, 1, 8);
        params.w[(0, 0)] = 0.5;
        let hyper = AdamHyper::default();
        let mut state = AdamState::new(&params, hyper);

        let mut theta = 0.5f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in 1..=100 {
            let g: f64 = rng.gen_range(-1.0..1.0);
            let mut grads = GradNetGrads::zeros_like(&params);
            grads.w[(0, 0)] = g;
            adam_step(&mut params, &grads, &mut state);

            m = hyper.beta1 * m + (1.0 - hyper.beta1) * g;
            v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g;
            let m_hat = m / (1.0 - hyper.beta1.powi(t));
            let v_hat = v / (1.0 - hyper.beta2.powi(t));
            theta -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            assert_relative_eq!(params.w[(0, 0)], theta, max_relative = 1e-12);
        }
    }
}
