//! Subcommand implementations.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use modalstring::audio::{estimate_fundamental, render_wav, spectrogram_csv, WavMode};
use modalstring::dataset::{self, DatasetRole, DatasetSpec};
use modalstring::gradnet::{self, GradNetField, GradNetParams};
use modalstring::metrics;
use modalstring::solver::{SavSolver, SimOptions, SolverConfig};
use modalstring::spectral::{PotentialField, SpectralNonlinearity, ZeroField};
use modalstring::string::{
    check_stability, scale_physical_params, ExcitationParams, PhysicalStringParams,
    ScaledStringParams,
};
use modalstring::train::{self, TrainConfig};

use crate::config::{pick, pick_opt, FileConfig};
use crate::{CheckArgs, EvaluateArgs, GenerateArgs, SimulateArgs, TrainArgs, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn preset_spec(name: &str, seed: u64) -> anyhow::Result<DatasetSpec> {
    Ok(match name {
        "desk-train" => DatasetSpec::desk_train(seed),
        "desk-val" => DatasetSpec::desk_val(seed),
        "desk-test" => DatasetSpec::desk_test(seed),
        "full-train" => DatasetSpec::full_train(seed),
        "full-val" => DatasetSpec::full_valtest(DatasetRole::Val, 20, seed),
        "full-test" => DatasetSpec::full_valtest(DatasetRole::Test, 60, seed),
        other => return Err(usage(format!("unknown preset '{other}'"))),
    })
}

pub fn generate(args: GenerateArgs) -> anyhow::Result<ExitCode> {
    let file = FileConfig::load(args.config.as_deref())?.generate;
    let out = pick_opt(args.out, file.out).ok_or_else(|| usage("--out is required"))?;
    let modes = pick(args.modes, file.modes, 20);
    let seed = pick_opt(args.seed, file.seed);
    let count = pick_opt(args.count, file.count);

    let spec_path = pick_opt(args.spec, file.spec);
    let preset = pick_opt(args.preset, file.preset);
    let mut spec = match (spec_path, preset) {
        (Some(path), None) => {
            let body = std::fs::read_to_string(&path)
                .with_context(|| format!("reading spec {}", path.display()))?;
            toml::from_str(&body).with_context(|| format!("parsing spec {}", path.display()))?
        }
        (None, Some(name)) => preset_spec(&name, seed.unwrap_or(0))?,
        (None, None) => return Err(usage("one of --spec or --preset is required")),
        (Some(_), Some(_)) => return Err(usage("--spec conflicts with --preset")),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    if let Some(count) = count {
        spec.count = count;
    }

    let t0 = Instant::now();
    let ds = dataset::generate(&spec, modes)?;
    dataset::save(&ds, &out)?;
    println!(
        "generated {} trajectories (M = {modes}, seed = {}) into {} in {:.1} s",
        ds.trajectories.len(),
        spec.seed,
        out.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train(args: TrainArgs) -> anyhow::Result<ExitCode> {
    let file = FileConfig::load(args.config.as_deref())?.train;
    let train_dir =
        pick_opt(args.train_dir, file.train_dir).ok_or_else(|| usage("--train-dir is required"))?;
    let val_dir =
        pick_opt(args.val_dir, file.val_dir).ok_or_else(|| usage("--val-dir is required"))?;
    let out = pick_opt(args.out, file.out).ok_or_else(|| usage("--out is required"))?;

    let defaults = TrainConfig::default();
    let mut cfg = TrainConfig {
        epochs: pick(args.epochs, file.epochs, defaults.epochs),
        batch_size: pick(args.batch_size, file.batch_size, defaults.batch_size),
        segment_ms: pick(args.segment_ms, file.segment_ms, defaults.segment_ms),
        val_period: pick(args.val_period, file.val_period, defaults.val_period),
        seed: pick(args.seed, file.seed, defaults.seed),
        hidden_dim: pick(args.hidden, file.hidden, defaults.hidden_dim),
        neg_slope: pick(args.neg_slope, file.neg_slope, defaults.neg_slope),
        lambda0: pick(args.lambda0, file.lambda0, defaults.lambda0),
        eps: pick(args.eps, file.eps, defaults.eps),
        adam: defaults.adam,
    };
    cfg.adam.lr = pick(args.lr, file.lr, defaults.adam.lr);

    let train_ds = dataset::load(&train_dir)?;
    let val_ds = dataset::load(&val_dir)?;
    println!(
        "training H = {} on {} trajectories ({} epochs, batch {}, seed {})",
        cfg.hidden_dim,
        train_ds.trajectories.len(),
        cfg.epochs,
        cfg.batch_size,
        cfg.seed
    );

    let t0 = Instant::now();
    let outcome = train::train(&train_ds, &val_ds, &cfg)?;
    std::fs::create_dir_all(&out)?;
    gradnet::write_checkpoint(&outcome.params, &out.join("best.gnck"))?;
    std::fs::write(out.join("train_log.csv"), train::log_to_csv(&outcome.log))?;
    std::fs::write(
        out.join("train_config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;
    println!(
        "done in {:.1} s; best validation loss {:.6e} at epoch {} -> {}",
        t0.elapsed().as_secs_f64(),
        outcome.best_val_loss,
        outcome.best_epoch,
        out.join("best.gnck").display()
    );
    Ok(ExitCode::SUCCESS)
}

struct SimSetup {
    scaled: ScaledStringParams,
    exc: ExcitationParams,
    fs: f64,
    duration: f64,
    cfg: SolverConfig,
}

fn resolve_field(
    checkpoint: Option<&Path>,
    oracle: bool,
    linear: bool,
) -> anyhow::Result<Option<GradNetParams>> {
    let chosen = [checkpoint.is_some(), oracle, linear]
        .iter()
        .filter(|&&x| x)
        .count();
    if chosen != 1 {
        return Err(usage(
            "choose exactly one nonlinearity: --checkpoint <file>, --oracle or --linear",
        ));
    }
    match checkpoint {
        Some(path) => Ok(Some(gradnet::read_checkpoint(path)?)),
        None => Ok(None),
    }
}

pub fn simulate(args: SimulateArgs) -> anyhow::Result<ExitCode> {
    let file = FileConfig::load(args.config.as_deref())?.simulate;
    let checkpoint = pick_opt(args.checkpoint, file.checkpoint);
    let oracle = args.oracle || file.oracle.unwrap_or(false);
    let linear = args.linear || file.linear.unwrap_or(false);
    let params = resolve_field(checkpoint.as_deref(), oracle, linear)?;

    let physical_flags = [
        pick_opt(args.length, file.length),
        pick_opt(args.density, file.density),
        pick_opt(args.radius, file.radius),
        pick_opt(args.tension, file.tension),
        pick_opt(args.young, file.young),
    ];
    let any_physical = physical_flags.iter().any(Option::is_some);
    let scaled_given = args.gamma.or(file.gamma).is_some()
        || args.kappa.or(file.kappa).is_some()
        || args.nu.or(file.nu).is_some()
        || args.sigma1_hat.or(file.sigma1_hat).is_some();
    if any_physical && scaled_given {
        return Err(usage("physical and scaled string parameters are exclusive"));
    }

    let mut modes = pick(args.modes, file.modes, 20);
    if let Some(p) = &params {
        if args.modes.is_none() && file.modes.is_none() {
            modes = p.modes();
        } else if modes != p.modes() {
            return Err(usage(format!(
                "--modes {modes} does not match the checkpoint ({} modes)",
                p.modes()
            )));
        }
    }

    let scaled = if any_physical {
        if physical_flags.iter().any(Option::is_none) {
            return Err(usage(
                "physical entry needs all of --length, --density, --radius, --tension, --young",
            ));
        }
        let phys = PhysicalStringParams {
            length: physical_flags[0].unwrap(),
            density: physical_flags[1].unwrap(),
            radius: physical_flags[2].unwrap(),
            tension: physical_flags[3].unwrap(),
            young_modulus: physical_flags[4].unwrap(),
            sigma0: pick(args.sigma0, file.sigma0, 2.0),
            sigma1: pick(args.sigma1, file.sigma1, 0.0),
        };
        scale_physical_params(&phys, modes)?
    } else {
        ScaledStringParams {
            gamma: pick(args.gamma, file.gamma, 174.62),
            kappa: pick(args.kappa, file.kappa, 1.05),
            nu: pick(args.nu, file.nu, 150.0),
            sigma0: pick(args.sigma0, file.sigma0, 2.0),
            sigma1_hat: pick(args.sigma1_hat, file.sigma1_hat, 2e-4),
            modes,
        }
    };

    let fs = pick(args.fs, file.fs, 32_000.0);
    let setup = SimSetup {
        scaled,
        exc: ExcitationParams {
            famp: pick(args.famp, file.famp, 2.5e4),
            te: pick(args.te, file.te, 1e-3),
            xe: pick(args.xe, file.xe, 0.3),
            xo: pick(args.xo, file.xo, 0.7),
        },
        fs,
        duration: pick(args.duration, file.duration, 1.0),
        cfg: SolverConfig::from_sample_rate(fs)
            .with_lambda0(pick(args.lambda0, file.lambda0, 1.0))
            .with_eps(pick(args.eps, file.eps, 1e-12)),
    };

    let ops = modalstring::string::build_modal_operators(&setup.scaled)?;
    let report = check_stability(&ops, setup.cfg.k);
    println!(
        "stability: omega_max = {:.1} rad/s vs 2/k = {:.1} (margin {:.1})",
        ops.omega_max(),
        2.0 / setup.cfg.k,
        report.margin
    );

    let oracle_field = SpectralNonlinearity::new(modes);
    let field: &dyn PotentialField = if let Some(p) = &params {
        &GradNetField::new(p) as &dyn PotentialField
    } else if oracle {
        &oracle_field
    } else {
        &ZeroField
    };

    // Hold the GradNetField alive for the solver's lifetime.
    let gradnet_field = params.as_ref().map(GradNetField::new);
    let field: &dyn PotentialField = match &gradnet_field {
        Some(f) => f,
        None => field,
    };

    let solver = SavSolver::new(&ops, field, setup.cfg, setup.scaled.nu, setup.exc)?;
    let samples = (setup.duration * setup.fs).round() as usize;
    let t0 = Instant::now();
    let traj = solver.simulate_with(&solver.rest_state(), SimOptions::dense(samples))?;
    let peak = traj.w.iter().fold(0.0f64, |acc, &w| acc.max(w.abs()));
    println!(
        "simulated {} samples at {} Hz in {:.2} s (peak |w| = {:.3e})",
        samples,
        setup.fs,
        t0.elapsed().as_secs_f64(),
        peak
    );
    if samples as f64 / setup.fs >= 0.7 {
        let early = &traj.w[..(0.1 * setup.fs) as usize];
        let f0 = setup.scaled.fundamental_hz();
        if let Ok(est) = estimate_fundamental(early, setup.fs, 0.7 * f0, 1.6 * f0) {
            println!("fundamental over the first 100 ms: {est:.2} Hz (gamma/2 = {f0:.2} Hz)");
        }
    }

    if let Some(path) = pick_opt(args.traj, file.traj) {
        traj.write(&path)?;
        println!("trajectory -> {}", path.display());
    }
    if let Some(path) = pick_opt(args.wav, file.wav) {
        let mode = if args.pcm16 || file.pcm16.unwrap_or(false) {
            WavMode::Pcm16
        } else {
            WavMode::Float32
        };
        render_wav(&traj.w, setup.fs, &path, mode)?;
        println!("audio -> {}", path.display());
    }
    if let Some(path) = pick_opt(args.spectrogram, file.spectrogram) {
        let window = pick(args.window, file.window, 4096).min(samples);
        let hop = pick(args.hop, file.hop, window / 4);
        spectrogram_csv(&traj.w, setup.fs, window, hop, &path)?;
        println!("spectrogram -> {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

pub fn evaluate(args: EvaluateArgs) -> anyhow::Result<ExitCode> {
    let file = FileConfig::load(args.config.as_deref())?.evaluate;
    let checkpoint = pick_opt(args.checkpoint, file.checkpoint)
        .ok_or_else(|| usage("--checkpoint is required"))?;
    let dataset_dir =
        pick_opt(args.dataset, file.dataset).ok_or_else(|| usage("--dataset is required"))?;
    let out_dir = pick_opt(args.out_dir, file.out_dir);
    let window_ms = pick(args.window_ms, file.window_ms, 100.0);

    let params = gradnet::read_checkpoint(&checkpoint)?;
    let ds = dataset::load(&dataset_dir)?;
    let t0 = Instant::now();
    let report = metrics::evaluate(&ds, &params, window_ms)?;
    println!(
        "evaluated {} trajectories in {:.1} s (window {window_ms} ms)",
        ds.trajectories.len(),
        t0.elapsed().as_secs_f64()
    );
    println!("{:<22} {:>14} {:>14}", "metric", "model", "linear");
    let rows = [
        ("mse_rel q initial", report.mse_rel_q_initial, report.linear.mse_rel_q_initial),
        ("mse_rel q full", report.mse_rel_q_full, report.linear.mse_rel_q_full),
        ("mse_rel w initial", report.mse_rel_w_initial, report.linear.mse_rel_w_initial),
        ("mse_rel w full", report.mse_rel_w_full, report.linear.mse_rel_w_full),
        ("mae_rel q initial", report.mae_rel_q_initial, report.linear.mae_rel_q_initial),
        ("mae_rel q full", report.mae_rel_q_full, report.linear.mae_rel_q_full),
        ("mae_rel w initial", report.mae_rel_w_initial, report.linear.mae_rel_w_initial),
        ("mae_rel w full", report.mae_rel_w_full, report.linear.mae_rel_w_full),
    ];
    for (name, model, linear) in rows {
        println!("{name:<22} {model:>14.6e} {linear:>14.6e}");
    }
    println!(
        "modes beating linear (per-mode MSE, initial window): {:.1}%",
        100.0 * report.modes_beating_linear()
    );

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("metrics.csv"), report.to_csv())?;
        std::fs::write(dir.join("per_mode_mse.csv"), report.per_mode_csv())?;
        println!("reports -> {}", dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

pub fn check(args: CheckArgs) -> anyhow::Result<ExitCode> {
    use modalstring::solver::{energy_at_state, quadratise, sherman_morrison_apply, SolverState};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
    let mut all_pass = true;
    let mut outcome = |name: &str, pass: bool, detail: String| {
        println!("{} {name}: {detail}", if pass { "pass" } else { "FAIL" });
        all_pass &= pass;
    };

    // DCT orthonormality.
    {
        let c = modalstring::spectral::dct_matrix(64);
        let gram = &c * c.transpose();
        let mut err: f64 = 0.0;
        for i in 0..64 {
            for j in 0..64 {
                let expect = if i == j { 1.0 } else { 0.0 };
                err = err.max((gram[(i, j)] - expect).abs());
            }
        }
        outcome("dct orthonormality", err < 1e-12, format!("max |CC^T - I| = {err:.2e}"));
    }

    // Spectral oracle force vs potential gradient.
    {
        let field = SpectralNonlinearity::new(6);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let q = DVector::from_fn(6, |_, _| rng.gen_range(-1e-3..1e-3));
            let f = field.force(&q);
            let h = 1e-9;
            let mut fd = DVector::zeros(6);
            for i in 0..6 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[i] += h;
                qm[i] -= h;
                fd[i] = -(field.potential(&qp) - field.potential(&qm)) / (2.0 * h);
            }
            worst = worst.max((&fd - &f).amax() / f.amax().max(1e-30));
        }
        outcome("spectral gradient oracle", worst < 1e-6, format!("max rel err = {worst:.2e}"));
    }

    // GradNet force vs potential gradient.
    {
        let params = gradnet::init(4, 8, 0.01, &mut rng);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let q = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            let f = gradnet::force(&params, &q)?;
            let mut fd = DVector::zeros(4);
            for i in 0..4 {
                let h = 1e-6 * (1.0 + q[i].abs());
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[i] += h;
                qm[i] -= h;
                fd[i] =
                    -(gradnet::potential(&params, &qp)? - gradnet::potential(&params, &qm)?)
                        / (2.0 * h);
            }
            worst = worst.max((&fd - &f).amax() / f.amax().max(1e-30));
        }
        outcome("gradnet potential consistency", worst < 1e-6, format!("max rel err = {worst:.2e}"));
    }

    // Sherman-Morrison residual.
    {
        let m = 24;
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let sigma = DVector::from_fn(m, |_, _| rng.gen_range(0.0..2.0));
            let g = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
            let rhs = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
            let c: f64 = rng.gen_range(0.0..1.0);
            let k = 1e-2;
            let x = sherman_morrison_apply(&sigma, c, &g, &rhs, k);
            let mut residual = DVector::zeros(m);
            let gx = g.dot(&x);
            for i in 0..m {
                residual[i] = (1.0 + k * sigma[i]) * x[i] + c * g[i] * gx - rhs[i];
            }
            worst = worst.max(residual.amax() / rhs.amax());
        }
        outcome("sherman-morrison solve", worst < 1e-13, format!("max residual = {worst:.2e}"));
    }

    // Short lossless energy-conservation run.
    {
        let s = ScaledStringParams {
            gamma: 160.0,
            kappa: 1.03,
            nu: 150.0,
            sigma0: 0.0,
            sigma1_hat: 0.0,
            modes: 12,
        };
        let ops = modalstring::string::build_modal_operators(&s)?;
        let field = SpectralNonlinearity::new(12);
        let cfg = SolverConfig::from_sample_rate(88_200.0).with_lambda0(0.0);
        let exc = ExcitationParams { famp: 0.0, te: 1e-3, xe: 0.3, xo: 0.7 };
        let solver = SavSolver::new(&ops, &field, cfg, s.nu, exc)?;
        let q0 = DVector::from_fn(12, |_, _| rng.gen_range(-1e-3..1e-3));
        let state0 = SolverState {
            psi: quadratise(field.potential(&q0), cfg.eps),
            q: q0,
            p: DVector::zeros(12),
        };
        let e0 = energy_at_state(&state0, &ops, s.nu, cfg.k);
        let mut state = state0;
        let mut drift: f64 = 0.0;
        for _ in 0..20_000 {
            state = solver.step(&state, 0.0)?;
            let e = energy_at_state(&state, &ops, s.nu, cfg.k);
            drift = drift.max(((e - e0) / e0).abs());
        }
        outcome("energy conservation", drift < 1e-9, format!("max rel drift = {drift:.2e}"));
    }

    // Backprop through the solver vs finite differences.
    {
        let spec = DatasetSpec {
            count: 1,
            fs: modalstring::dataset::ParamRange::fixed(32_000.0),
            t_sim: modalstring::dataset::ParamRange::fixed(0.005),
            ..DatasetSpec::desk_train(args.seed)
        };
        let ds = dataset::generate(&spec, 4)?;
        let draw = ds.draws[0];
        let ctx = train::TrajectoryContext::new(
            &draw.scaled_params(4),
            draw.excitation(),
            draw.fs,
            1e-12,
            0.0,
        )?;
        // Randomised biases and scalings keep the pre-activations away from
        // the leaky-ReLU kink, where one-sided derivatives would spoil the
        // difference quotient.
        let mut params = gradnet::init(4, 6, 0.01, &mut rng);
        params.b = DVector::from_fn(6, |_, _| rng.gen_range(-0.3..0.3));
        params.log_alpha = DVector::from_fn(6, |_, _| rng.gen_range(-0.3..0.3));
        params.log_beta = DVector::from_fn(6, |_, _| rng.gen_range(-0.3..0.3));
        let seg = train::Segment { start: 4, len: 9 };
        let (_, analytic) =
            train::forward_backward_segment(&ds.trajectories[0], seg, &params, &ctx)?;
        let fd = train::finite_difference_param_grads(
            &ds.trajectories[0],
            seg,
            &params,
            &ctx,
            1e-6,
            None,
        )?;
        let scale = analytic.amax().max(fd.amax()).max(1e-300);
        let mut worst: f64 = 0.0;
        for (a, b) in analytic.w.iter().zip(fd.w.iter()) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in analytic.b.iter().zip(fd.b.iter()) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in analytic.log_alpha.iter().zip(fd.log_alpha.iter()) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in analytic.log_beta.iter().zip(fd.log_beta.iter()) {
            worst = worst.max((a - b).abs());
        }
        let rel = worst / scale;
        outcome("solver backprop gradients", rel < 1e-6, format!("max rel err = {rel:.2e}"));
    }

    if all_pass {
        println!("all checks passed");
        Ok(ExitCode::SUCCESS)
    } else {
        bail!("one or more self-checks failed");
    }
}
