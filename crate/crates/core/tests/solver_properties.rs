//! Solver conservation, dissipation and oracle-equivalence properties.

mod common;

use common::{dense_reference_step, rng, state_relative_error};
use modalstring::solver::{energy_at_state, SavSolver, SolverConfig, SolverState};
use modalstring::spectral::{PotentialField, SpectralNonlinearity};
use modalstring::string::{build_modal_operators, mode_shape, ExcitationParams, ScaledStringParams};

#[test]
fn lossless_unforced_energy_conserved_m3() {
    let params = ScaledStringParams {
        gamma: 160.0,
        kappa: 1.03,
        nu: 150.0,
        sigma0: 0.0,
        sigma1_hat: 0.0,
        modes: 3,
    };
    let ops = build_modal_operators(&params).unwrap();
    let field = SpectralNonlinearity::new(3);
    let cfg = SolverConfig::from_sample_rate(88_200.0).with_lambda0(0.0);
    let exc = ExcitationParams {
        famp: 0.0,
        te: 1e-3,
        xe: 0.3,
        xo: 0.7,
    };
    let solver = SavSolver::new(&ops, &field, cfg, params.nu, exc).unwrap();

    let mut r = rng(31);
    let q0 = common::random_vector(&mut r, 3, 1e-3);
    let initial = SolverState {
        psi: (2.0 * field.potential(&q0) + cfg.eps).sqrt(),
        q: q0,
        p: nalgebra::DVector::zeros(3),
    };
    let e0 = energy_at_state(&initial, &ops, params.nu, cfg.k);
    assert!(e0 > 0.0);
    let mut state = initial;
    let mut max_drift: f64 = 0.0;
    for _ in 0..100_000 {
        state = solver.step(&state, 0.0).unwrap();
        let e = energy_at_state(&state, &ops, params.nu, cfg.k);
        max_drift = max_drift.max(((e - e0) / e0).abs());
    }
    assert!(max_drift < 1e-9, "relative energy drift {max_drift:e}");
}

#[test]
fn energy_non_increasing_after_excitation_with_loss() {
    let params = ScaledStringParams {
        gamma: 180.0,
        kappa: 1.05,
        nu: 140.0,
        sigma0: 2.0,
        sigma1_hat: 2e-4,
        modes: 8,
    };
    let ops = build_modal_operators(&params).unwrap();
    let field = SpectralNonlinearity::new(8);
    let cfg = SolverConfig::from_sample_rate(32_000.0);
    let exc = ExcitationParams {
        famp: 3e4,
        te: 1e-3,
        xe: 0.35,
        xo: 0.7,
    };
    let solver = SavSolver::new(&ops, &field, cfg, params.nu, exc).unwrap();
    let traj = solver
        .simulate(&SolverState::rest(8, cfg.eps), 6400)
        .unwrap();

    let first_free = (exc.te * traj.fs).ceil() as usize + 1;
    let mut prev = f64::INFINITY;
    for n in first_free..traj.state_count() {
        let e = energy_at_state(&traj.state_at(n), &ops, params.nu, cfg.k);
        assert!(
            e <= prev * (1.0 + 1e-12),
            "energy grew at step {n}: {prev} -> {e}"
        );
        prev = e;
    }
}

#[test]
fn stepper_tracks_dense_reference_along_trajectory() {
    // Roll the production stepper and the dense-LU reference side by side
    // through a forced, lossy, control-enabled run.
    let modes = 7;
    let params = ScaledStringParams {
        gamma: 170.0,
        kappa: 1.04,
        nu: 145.0,
        sigma0: 2.0,
        sigma1_hat: 2e-4,
        modes,
    };
    let ops = build_modal_operators(&params).unwrap();
    let field = SpectralNonlinearity::new(modes);
    let cfg = SolverConfig::from_sample_rate(48_000.0);
    let exc = ExcitationParams {
        famp: 2.8e4,
        te: 1.2e-3,
        xe: 0.29,
        xo: 0.64,
    };
    let solver = SavSolver::new(&ops, &field, cfg, params.nu, exc).unwrap();
    let phi_e = mode_shape(exc.xe, modes).unwrap();

    let mut state = SolverState::rest(modes, cfg.eps);
    let mut dense_state = state.clone();
    for n in 1..400 {
        let fe = modalstring::string::excitation_force((n as f64 - 0.5) * cfg.k, &exc);
        state = solver.step(&state, fe).unwrap();
        dense_state =
            dense_reference_step(&dense_state, &field, &ops, params.nu, &cfg, &phi_e, fe);
        let err = state_relative_error(&state, &dense_state);
        assert!(err < 1e-10, "step {n}: drift from dense reference {err:e}");
    }
}

#[test]
fn forced_run_stays_bounded_at_high_amplitude() {
    let modes = 20;
    let params = ScaledStringParams {
        gamma: 246.94,
        kappa: 1.1,
        nu: 174.62,
        sigma0: 2.0,
        sigma1_hat: 2e-4,
        modes,
    };
    let ops = build_modal_operators(&params).unwrap();
    let field = SpectralNonlinearity::new(modes);
    let cfg = SolverConfig::from_sample_rate(32_000.0);
    let exc = ExcitationParams {
        famp: 5e4,
        te: 1.5e-3,
        xe: 0.5,
        xo: 0.5,
    };
    let solver = SavSolver::new(&ops, &field, cfg, params.nu, exc).unwrap();
    let traj = solver
        .simulate(&SolverState::rest(modes, cfg.eps), 32_000)
        .unwrap();
    let mut max_q: f64 = 0.0;
    for q in &traj.q {
        assert!(q.iter().all(|x| x.is_finite()));
        max_q = max_q.max(q.amax());
    }
    assert!(max_q < 1e6, "|q| reached {max_q:e}");
    assert!(max_q > 0.0);
}

#[test]
fn drift_gap_shrinks_with_control_term() {
    let modes = 10;
    let params = ScaledStringParams {
        gamma: 200.0,
        kappa: 1.06,
        nu: 160.0,
        sigma0: 2.0,
        sigma1_hat: 2e-4,
        modes,
    };
    let ops = build_modal_operators(&params).unwrap();
    let field = SpectralNonlinearity::new(modes);
    let exc = ExcitationParams {
        famp: 4e4,
        te: 1e-3,
        xe: 0.33,
        xo: 0.71,
    };
    let samples = 16_000;

    let mean_gap = |lambda0: f64| -> f64 {
        let cfg = SolverConfig::from_sample_rate(32_000.0).with_lambda0(lambda0);
        let solver = SavSolver::new(&ops, &field, cfg, params.nu, exc).unwrap();
        let traj = solver
            .simulate(&SolverState::rest(modes, cfg.eps), samples)
            .unwrap();
        let mut acc = 0.0;
        for n in 0..traj.state_count() {
            let target = (2.0 * field.potential(&traj.q[n]) + cfg.eps).sqrt();
            acc += (traj.psi[n] - target).abs();
        }
        acc / traj.state_count() as f64
    };

    let with_control = mean_gap(1.0);
    let without = mean_gap(0.0);
    assert!(
        with_control < without,
        "control term failed to reduce drift: {with_control:e} vs {without:e}"
    );
}

#[test]
fn evaluation_metrics_invariant_under_trajectory_order() {
    use modalstring::dataset::{generate, DatasetSpec, ParamRange};
    use modalstring::gradnet;

    let spec = DatasetSpec {
        count: 3,
        t_sim: ParamRange::fixed(0.03),
        ..DatasetSpec::desk_train(77)
    };
    let ds = generate(&spec, 6).unwrap();
    let mut permuted = ds.clone();
    permuted.draws.rotate_left(1);
    permuted.trajectories.rotate_left(1);

    let params = gradnet::init(6, 8, 0.01, &mut rng(78));
    let a = modalstring::metrics::evaluate(&ds, &params, 10.0).unwrap();
    let b = modalstring::metrics::evaluate(&permuted, &params, 10.0).unwrap();
    let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(1e-300);
    assert!(rel(a.mse_rel_q_initial, b.mse_rel_q_initial) < 1e-12);
    assert!(rel(a.mae_rel_w_full, b.mae_rel_w_full) < 1e-12);
    assert!(rel(a.linear.mse_rel_q_initial, b.linear.mse_rel_q_initial) < 1e-12);
}
