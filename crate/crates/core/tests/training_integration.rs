//! End-to-end behaviour of the training loop on small datasets.

mod common;

use common::rng;
use modalstring::dataset::{generate, Dataset, DatasetSpec, ParamRange};
use modalstring::gradnet::{self, GradNetParams};
use modalstring::train::{train, TrainConfig};
use nalgebra::DVector;
use rand::Rng;

fn tiny_dataset(seed: u64, count: usize, t_sim: f64) -> Dataset {
    let spec = DatasetSpec {
        count,
        fs: ParamRange::fixed(16_000.0),
        t_sim: ParamRange::fixed(t_sim),
        ..DatasetSpec::desk_train(seed)
    };
    generate(&spec, 6).unwrap()
}

fn tiny_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        val_period: 5,
        seed,
        hidden_dim: 16,
        ..TrainConfig::default()
    }
}

fn mean_force_norm(params: &GradNetParams, dataset: &Dataset) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for traj in &dataset.trajectories {
        for q in traj.q.iter().step_by(50) {
            acc += gradnet::force(params, q).unwrap().norm();
            count += 1;
        }
    }
    acc / count as f64
}

#[test]
fn linear_targets_drive_network_toward_zero_force() {
    // Targets generated with the nonlinearity switched off, training told the
    // string is nonlinear: the best fit is a vanishing gradient field.
    let mut spec = DatasetSpec {
        count: 3,
        fs: ParamRange::fixed(16_000.0),
        t_sim: ParamRange::fixed(0.1),
        nu: ParamRange::fixed(0.0),
        ..DatasetSpec::desk_train(101)
    };
    let mut ds = generate(&spec, 6).unwrap();
    spec.seed = 102;
    let mut val = generate(&spec, 6).unwrap();
    for d in ds.draws.iter_mut().chain(val.draws.iter_mut()) {
        d.nu = 140.0;
    }

    let cfg = tiny_config(30, 103);
    let outcome = train(&ds, &val, &cfg).unwrap();

    let mut init_rng = rng(cfg.seed);
    let init = gradnet::init(6, cfg.hidden_dim, cfg.neg_slope, &mut init_rng);
    let before = mean_force_norm(&init, &ds);
    let after = mean_force_norm(&outcome.params, &ds);
    assert!(
        after < before,
        "training on linear targets should shrink the force: {before:e} -> {after:e}"
    );
}

#[test]
fn zero_learning_rate_keeps_parameters_and_losses() {
    let ds = tiny_dataset(110, 2, 0.05);
    let val = tiny_dataset(111, 1, 0.05);
    let mut cfg = tiny_config(6, 112);
    cfg.adam.lr = 0.0;
    let outcome = train(&ds, &val, &cfg).unwrap();

    let mut init_rng = rng(cfg.seed);
    let init = gradnet::init(6, cfg.hidden_dim, cfg.neg_slope, &mut init_rng);
    assert_eq!(outcome.params, init, "lr = 0 must leave parameters untouched");
    // Losses are constant; only the shuffled summation order may wiggle the
    // last bits.
    let first = outcome.log[0].train_loss;
    for rec in &outcome.log {
        assert!(((rec.train_loss - first) / first).abs() < 1e-13);
        assert_eq!(rec.diverged_segments, 0);
    }
}

#[test]
fn fixed_seed_training_is_bit_deterministic() {
    let ds = tiny_dataset(120, 2, 0.05);
    let val = tiny_dataset(121, 1, 0.05);
    let cfg = tiny_config(5, 122);
    let a = train(&ds, &val, &cfg).unwrap();
    let b = train(&ds, &val, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.best_epoch, b.best_epoch);
    assert_eq!(a.best_val_loss.to_bits(), b.best_val_loss.to_bits());
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        assert_eq!(x.val_loss.map(f64::to_bits), y.val_loss.map(f64::to_bits));
        assert_eq!(x.diverged_segments, y.diverged_segments);
    }
}

#[test]
fn short_training_reduces_validation_loss() {
    let ds = tiny_dataset(130, 3, 0.1);
    let val = tiny_dataset(131, 2, 0.1);
    let mut cfg = tiny_config(20, 132);
    cfg.val_period = 1;
    let outcome = train(&ds, &val, &cfg).unwrap();
    let first_val = outcome.log[0].val_loss.unwrap();
    assert!(
        outcome.best_val_loss < first_val,
        "validation loss did not improve: {first_val:e} -> {:e}",
        outcome.best_val_loss
    );
    assert!(outcome.best_epoch >= 1);
}

#[test]
fn non_finite_parameters_surface_as_divergence() {
    use modalstring::train::{forward_backward_segment, Segment, TrajectoryContext};

    let ds = tiny_dataset(140, 1, 0.02);
    let mut params = gradnet::init(6, 8, 0.01, &mut rng(141));
    params.w[(0, 0)] = f64::NAN;
    let draw = &ds.draws[0];
    let ctx = TrajectoryContext::new(
        &draw.scaled_params(6),
        draw.excitation(),
        draw.fs,
        1e-12,
        1.0,
    )
    .unwrap();
    let seg = Segment { start: 0, len: 9 };
    let err = forward_backward_segment(&ds.trajectories[0], seg, &params, &ctx).unwrap_err();
    assert!(matches!(err, modalstring::Error::Diverged { .. }));
}

#[test]
fn gradient_accumulation_is_linear_in_duplication() {
    use modalstring::train::{forward_backward_segment, Segment, TrajectoryContext};

    let ds = tiny_dataset(150, 1, 0.02);
    let mut r = rng(151);
    let mut params = gradnet::init(6, 8, 0.01, &mut r);
    // Give the scalings some texture.
    params.log_alpha = DVector::from_fn(8, |_, _| r.gen_range(-0.2..0.2));
    let draw = &ds.draws[0];
    let ctx = TrajectoryContext::new(
        &draw.scaled_params(6),
        draw.excitation(),
        draw.fs,
        1e-12,
        1.0,
    )
    .unwrap();
    let seg = Segment { start: 0, len: 9 };
    let (loss1, g1) = forward_backward_segment(&ds.trajectories[0], seg, &params, &ctx).unwrap();
    let (loss2, g2) = forward_backward_segment(&ds.trajectories[0], seg, &params, &ctx).unwrap();
    assert_eq!(loss1.to_bits(), loss2.to_bits(), "reruns must be identical");
    assert_eq!(g1, g2);
}
