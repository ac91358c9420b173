//! Shared helpers for integration tests: seeded RNGs and an independent
//! dense-matrix reference implementation of the solver update.

#![allow(dead_code)]

use modalstring::solver::{SolverConfig, SolverState};
use modalstring::spectral::PotentialField;
use modalstring::string::ModalOperators;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vector<R: Rng>(rng: &mut R, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.gen_range(-scale..scale))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One step of the update scheme written directly against the full matrices
/// and solved with a dense LU factorisation, with the coupling vector
/// re-derived from the field's force and potential. No code is shared with
/// the production stepper beyond the field itself.
pub fn dense_reference_step<F: PotentialField>(
    state: &SolverState,
    field: &F,
    ops: &ModalOperators,
    nu: f64,
    cfg: &SolverConfig,
    phi_e: &DVector<f64>,
    fe_half: f64,
) -> SolverState {
    let k = cfg.k;
    let m = state.q.len();
    let q_half = &state.q + &state.p * (0.5 * k);

    let psi_half = (2.0 * field.potential(&q_half) + cfg.eps).sqrt();
    let g_std = -field.force(&q_half) / psi_half;
    let l1: f64 = state.p.iter().map(|x| x.abs()).sum();
    let g_mod = if cfg.lambda0 == 0.0 || l1 < cfg.p_l1_tolerance {
        DVector::zeros(m)
    } else {
        let gap = state.psi - (2.0 * field.potential(&state.q) + cfg.eps).sqrt();
        state.p.map(|x| -cfg.lambda0 * gap * sign(x) / l1)
    };
    let g = g_std + g_mod;

    let c = 0.25 * k * k * nu * nu;
    let mut lhs = DMatrix::<f64>::identity(m, m);
    let mut mirror = DMatrix::<f64>::identity(m, m);
    for i in 0..m {
        lhs[(i, i)] += k * ops.sigma[i];
        mirror[(i, i)] -= k * ops.sigma[i];
    }
    lhs.gemm(c, &g, &g.transpose(), 1.0);
    mirror.gemm(-c, &g, &g.transpose(), 1.0);

    let mut omega2_q = DVector::zeros(m);
    for i in 0..m {
        omega2_q[i] = ops.omega2[i] * q_half[i];
    }
    let rhs = &mirror * &state.p
        + (-omega2_q - &g * (nu * nu * state.psi) + phi_e * fe_half) * k;
    let p_next = lhs.lu().solve(&rhs).expect("dense velocity solve");
    let q_next = &q_half + &p_next * (0.5 * k);
    let psi_next = state.psi + k * g.dot(&((&state.p + &p_next) * 0.5));
    SolverState {
        q: q_next,
        p: p_next,
        psi: psi_next,
    }
}

/// Largest relative component difference between two states, measured
/// against the infinity norm of each block.
pub fn state_relative_error(a: &SolverState, b: &SolverState) -> f64 {
    let block = |x: &DVector<f64>, y: &DVector<f64>| {
        let scale = x.amax().max(y.amax()).max(1e-300);
        (x - y).amax() / scale
    };
    let psi_scale = a.psi.abs().max(b.psi.abs()).max(1e-300);
    block(&a.q, &b.q)
        .max(block(&a.p, &b.p))
        .max((a.psi - b.psi).abs() / psi_scale)
}
