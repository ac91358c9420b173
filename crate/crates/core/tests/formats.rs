//! Property tests for the binary containers.

mod common;

use modalstring::audio::{read_wav_f32, render_wav, WavMode};
use modalstring::gradnet::{read_checkpoint, write_checkpoint, GradNetParams};
use modalstring::solver::Trajectory;
use modalstring::string::ExcitationParams;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn finite_f64() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::ZERO
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn trajectory_container_round_trips(
        modes in 1usize..5,
        states in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut r = common::rng(seed);
        use rand::Rng;
        let traj = Trajectory {
            fs: 32_000.0,
            exc: ExcitationParams { famp: r.gen_range(0.0..1e5), te: 1e-3, xe: 0.3, xo: 0.7 },
            lambda0: 1.0,
            state_stride: 1,
            q: (0..states).map(|_| DVector::from_fn(modes, |_, _| r.gen_range(-1.0..1.0))).collect(),
            p: (0..states).map(|_| DVector::from_fn(modes, |_, _| r.gen_range(-1.0..1.0))).collect(),
            psi: (0..states).map(|_| r.gen_range(0.0..2.0)).collect(),
            w: (0..states).map(|_| r.gen_range(-1.0..1.0)).collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mtrj");
        traj.write(&path).unwrap();
        let loaded = Trajectory::read(&path).unwrap();
        prop_assert_eq!(loaded, traj);
    }

    #[test]
    fn checkpoint_round_trips(
        modes in 1usize..5,
        hidden in 1usize..7,
        neg_slope in 0.001f64..0.5,
        seed in any::<u64>(),
    ) {
        let mut r = common::rng(seed);
        use rand::Rng;
        let params = GradNetParams {
            w: DMatrix::from_fn(hidden, modes, |_, _| r.gen_range(-2.0..2.0)),
            b: DVector::from_fn(hidden, |_, _| r.gen_range(-1.0..1.0)),
            log_alpha: DVector::from_fn(hidden, |_, _| r.gen_range(-1.0..1.0)),
            log_beta: DVector::from_fn(hidden, |_, _| r.gen_range(-1.0..1.0)),
            neg_slope,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.gnck");
        write_checkpoint(&params, &path).unwrap();
        let loaded = read_checkpoint(&path).unwrap();
        prop_assert_eq!(loaded, params);
    }

    #[test]
    fn wav_float32_round_trips(samples in prop::collection::vec(finite_f64(), 1..64)) {
        // Only the f32 cast is lossy; reading back returns exactly the cast
        // values.
        let clipped: Vec<f64> = samples.iter().map(|&s| s.clamp(-1e30, 1e30)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        render_wav(&clipped, 48_000.0, &path, WavMode::Float32).unwrap();
        let (read, fs) = read_wav_f32(&path).unwrap();
        prop_assert_eq!(fs, 48_000);
        prop_assert_eq!(read.len(), clipped.len());
        for (a, b) in read.iter().zip(&clipped) {
            prop_assert_eq!(a.to_bits(), (*b as f32).to_bits());
        }
    }
}
