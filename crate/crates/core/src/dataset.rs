//! Synthetic dataset generation, persistence and integrity checking.
//!
//! Per-trajectory parameters are drawn uniformly from configured ranges, the
//! excitation amplitude range is scaled linearly with the drawn fundamental
//! frequency to keep the displacement range (and with it the strength of the
//! nonlinear effects) comparable across strings, and every trajectory is
//! produced by the oracle nonlinearity under the stability check. A dataset
//! on disk is a directory of trajectory files plus a manifest recording the
//! seed, the spec, every draw and content hashes.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::solver::{SavSolver, SimOptions, SolverConfig, Trajectory};
use crate::spectral::SpectralNonlinearity;
use crate::string::{build_modal_operators, check_stability, ExcitationParams, ScaledStringParams};

/// Closed interval for a uniformly sampled parameter; lo == hi pins a value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn fixed(value: f64) -> Self {
        Self {
            lo: value,
            hi: value,
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if !self.lo.is_finite() || !self.hi.is_finite() || self.lo > self.hi {
            return Err(Error::InvalidParameter(format!(
                "range for {name} must be ordered and finite, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..self.hi)
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            lo: self.lo * factor,
            hi: self.hi * factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    Train,
    Val,
    Test,
}

/// Sampling specification for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub role: DatasetRole,
    pub count: usize,
    pub seed: u64,
    pub fs: ParamRange,
    pub t_sim: ParamRange,
    pub te: ParamRange,
    /// Excitation amplitude range quoted at the reference fundamental.
    pub famp_ref: ParamRange,
    /// Fundamental frequency (Hz) at which `famp_ref` applies.
    pub reference_fundamental_hz: f64,
    pub gamma: ParamRange,
    pub kappa: ParamRange,
    pub nu: ParamRange,
    pub sigma0: ParamRange,
    pub sigma1_hat: ParamRange,
    pub xe: ParamRange,
    pub xo: ParamRange,
    /// Drift-control gain used during generation.
    pub lambda0: f64,
    /// SAV gauge constant used during generation.
    pub eps: f64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidParameter(
                "trajectory count must be positive".into(),
            ));
        }
        for (name, range) in [
            ("fs", &self.fs),
            ("t_sim", &self.t_sim),
            ("te", &self.te),
            ("famp_ref", &self.famp_ref),
            ("gamma", &self.gamma),
            ("kappa", &self.kappa),
            ("nu", &self.nu),
            ("sigma0", &self.sigma0),
            ("sigma1_hat", &self.sigma1_hat),
            ("xe", &self.xe),
            ("xo", &self.xo),
        ] {
            range.validate(name)?;
        }
        if !(self.reference_fundamental_hz > 0.0) {
            return Err(Error::InvalidParameter(
                "reference fundamental must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Desk-scale training spec: lower half-octave of fundamentals
    /// (61.74 to 87.31 Hz), 32 kHz, short simulations.
    pub fn desk_train(seed: u64) -> Self {
        Self {
            role: DatasetRole::Train,
            count: 10,
            seed,
            fs: ParamRange::fixed(32_000.0),
            t_sim: ParamRange::fixed(1.0),
            te: ParamRange::new(0.5e-3, 1.5e-3),
            famp_ref: ParamRange::new(2.5e4, 3.5e4),
            reference_fundamental_hz: 61.74,
            gamma: ParamRange::new(123.48, 174.62),
            kappa: ParamRange::new(1.01, 1.05),
            nu: ParamRange::new(123.48, 174.62),
            sigma0: ParamRange::fixed(3.0),
            sigma1_hat: ParamRange::fixed(2e-4),
            xe: ParamRange::new(0.1, 0.9),
            xo: ParamRange::new(0.1, 0.9),
            lambda0: 1.0,
            eps: 1e-12,
        }
    }

    /// Desk-scale validation spec: next half-octave (87.31 to 123.47 Hz),
    /// disjoint stiffness range, smaller sigma0.
    pub fn desk_val(seed: u64) -> Self {
        Self {
            role: DatasetRole::Val,
            count: 4,
            seed,
            t_sim: ParamRange::fixed(0.25),
            famp_ref: ParamRange::new(3.5e4, 5e4),
            gamma: ParamRange::new(174.62, 246.94),
            kappa: ParamRange::new(1.05, 1.1),
            sigma0: ParamRange::fixed(2.0),
            ..Self::desk_train(seed)
        }
    }

    /// Desk-scale test spec: like validation but long enough for late-window
    /// pitch analysis.
    pub fn desk_test(seed: u64) -> Self {
        Self {
            role: DatasetRole::Test,
            t_sim: ParamRange::fixed(1.0),
            ..Self::desk_val(seed)
        }
    }

    /// Full-scale training spec (88.2 kHz, 2 s, 60 trajectories).
    pub fn full_train(seed: u64) -> Self {
        Self {
            count: 60,
            fs: ParamRange::fixed(88_200.0),
            t_sim: ParamRange::fixed(2.0),
            ..Self::desk_train(seed)
        }
    }

    /// Full-scale validation/test spec (96 kHz, 3 s).
    pub fn full_valtest(role: DatasetRole, count: usize, seed: u64) -> Self {
        Self {
            role,
            count,
            fs: ParamRange::fixed(96_000.0),
            t_sim: ParamRange::fixed(3.0),
            ..Self::desk_val(seed)
        }
    }
}

/// Scale an amplitude interval linearly with the fundamental frequency to
/// preserve the displacement range of the dominant forced response
/// (amplitude ~ famp Te / (2 omega)).
pub fn famp_for_frequency(
    base: ParamRange,
    omega_fundamental: f64,
    omega_reference: f64,
) -> ParamRange {
    debug_assert!(omega_fundamental > 0.0 && omega_reference > 0.0);
    base.scaled(omega_fundamental / omega_reference)
}

/// Sampled parameters for one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDraw {
    pub gamma: f64,
    pub kappa: f64,
    pub nu: f64,
    pub sigma0: f64,
    pub sigma1_hat: f64,
    pub fs: f64,
    pub t_sim: f64,
    pub te: f64,
    pub famp: f64,
    pub xe: f64,
    pub xo: f64,
    pub fundamental_hz: f64,
}

impl TrajectoryDraw {
    pub fn scaled_params(&self, modes: usize) -> ScaledStringParams {
        ScaledStringParams {
            gamma: self.gamma,
            kappa: self.kappa,
            nu: self.nu,
            sigma0: self.sigma0,
            sigma1_hat: self.sigma1_hat,
            modes,
        }
    }

    pub fn excitation(&self) -> ExcitationParams {
        ExcitationParams {
            famp: self.famp,
            te: self.te,
            xe: self.xe,
            xo: self.xo,
        }
    }
}

/// Draw per-trajectory parameters: independent uniform draws per range, with
/// the amplitude taken from the frequency-scaled interval.
pub fn sample_spec(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Result<Vec<TrajectoryDraw>> {
    spec.validate()?;
    let mut draws = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let gamma = spec.gamma.sample(rng);
        let kappa = spec.kappa.sample(rng);
        let nu = spec.nu.sample(rng);
        let sigma0 = spec.sigma0.sample(rng);
        let sigma1_hat = spec.sigma1_hat.sample(rng);
        let fs = spec.fs.sample(rng);
        let t_sim = spec.t_sim.sample(rng);
        let te = spec.te.sample(rng);
        let fundamental_hz = 0.5 * gamma;
        let famp_range =
            famp_for_frequency(spec.famp_ref, fundamental_hz, spec.reference_fundamental_hz);
        let famp = famp_range.sample(rng);
        let xe = spec.xe.sample(rng);
        let xo = spec.xo.sample(rng);
        draws.push(TrajectoryDraw {
            gamma,
            kappa,
            nu,
            sigma0,
            sigma1_hat,
            fs,
            t_sim,
            te,
            famp,
            xe,
            xo,
            fundamental_hz,
        });
    }
    Ok(draws)
}

/// A generated dataset: oracle trajectories plus their draws and provenance.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub modes: usize,
    pub spec_hash: String,
    pub draws: Vec<TrajectoryDraw>,
    pub trajectories: Vec<Trajectory>,
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Hash of the generation inputs (spec serialisation plus mode count).
pub fn spec_hash(spec: &DatasetSpec, modes: usize) -> String {
    let body = toml::to_string(spec).expect("spec serialises");
    hex_digest(format!("modes={modes}\n{body}").as_bytes())
}

/// Simulate every draw with the oracle nonlinearity from rest.
///
/// Generation is refused if any draw violates the stability bound; the
/// offending draw is reported in the error.
pub fn generate(spec: &DatasetSpec, modes: usize) -> Result<Dataset> {
    spec.validate()?;
    if modes == 0 {
        return Err(Error::InvalidParameter("mode count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draws = sample_spec(spec, &mut rng)?;
    for (i, draw) in draws.iter().enumerate() {
        let ops = build_modal_operators(&draw.scaled_params(modes))?;
        let report = check_stability(&ops, 1.0 / draw.fs);
        if !report.stable {
            return Err(Error::InvalidParameter(format!(
                "draw {i} is unstable at fs = {} Hz (gamma = {}, kappa = {}, M = {modes}); \
                 lower the mode count or raise the sampling rate",
                draw.fs, draw.gamma, draw.kappa
            )));
        }
    }

    let trajectories: Vec<Result<Trajectory>> = draws
        .par_iter()
        .map(|draw| {
            let s = draw.scaled_params(modes);
            let ops = build_modal_operators(&s)?;
            let field = SpectralNonlinearity::new(modes);
            let cfg = SolverConfig::from_sample_rate(draw.fs)
                .with_eps(spec.eps)
                .with_lambda0(spec.lambda0);
            let solver = SavSolver::new(&ops, &field, cfg, draw.nu, draw.excitation())?;
            let samples = (draw.t_sim * draw.fs).round() as usize;
            // The oracle potential vanishes at rest, so this matches the
            // plain sqrt(eps) initialisation exactly.
            solver.simulate_with(&solver.rest_state(), SimOptions::dense(samples))
        })
        .collect();
    let trajectories = trajectories.into_iter().collect::<Result<Vec<_>>>()?;

    Ok(Dataset {
        spec: spec.clone(),
        modes,
        spec_hash: spec_hash(spec, modes),
        draws,
        trajectories,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    sha256: String,
    draw: TrajectoryDraw,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    modes: usize,
    spec_hash: String,
    spec: DatasetSpec,
    entries: Vec<ManifestEntry>,
}

const MANIFEST_FILE: &str = "manifest.toml";
const MANIFEST_HASH_FILE: &str = "manifest.sha256";

fn trajectory_file_name(index: usize) -> String {
    format!("traj_{index:04}.mtrj")
}

/// Write the dataset as a directory of trajectory files plus a manifest and
/// its hash.
pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(dataset.trajectories.len());
    for (i, (traj, draw)) in dataset
        .trajectories
        .iter()
        .zip(&dataset.draws)
        .enumerate()
    {
        let file = trajectory_file_name(i);
        let path = dir.join(&file);
        traj.write(&path)?;
        let bytes = fs::read(&path)?;
        entries.push(ManifestEntry {
            file,
            sha256: hex_digest(&bytes),
            draw: *draw,
        });
    }
    let manifest = Manifest {
        modes: dataset.modes,
        spec_hash: dataset.spec_hash.clone(),
        spec: dataset.spec.clone(),
        entries,
    };
    let body = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialisation failed: {e}")))?;
    fs::write(dir.join(MANIFEST_FILE), &body)?;
    fs::write(dir.join(MANIFEST_HASH_FILE), hex_digest(body.as_bytes()))?;
    Ok(())
}

/// Load a dataset, validating the manifest hash, the spec hash and every
/// trajectory file's content hash.
pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::MissingTrajectory(format!(
            "{} has no {MANIFEST_FILE}",
            dir.display()
        )));
    }
    let body = fs::read_to_string(&manifest_path)?;
    let recorded_hash = fs::read_to_string(dir.join(MANIFEST_HASH_FILE))
        .map_err(|_| Error::Integrity("manifest hash file is missing".into()))?;
    if hex_digest(body.as_bytes()) != recorded_hash.trim() {
        return Err(Error::Integrity(
            "manifest does not match its recorded hash".into(),
        ));
    }
    let manifest: Manifest =
        toml::from_str(&body).map_err(|e| Error::Format(format!("manifest parse: {e}")))?;
    if spec_hash(&manifest.spec, manifest.modes) != manifest.spec_hash {
        return Err(Error::Integrity("spec hash mismatch in manifest".into()));
    }

    let mut draws = Vec::with_capacity(manifest.entries.len());
    let mut trajectories = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let path = dir.join(&entry.file);
        if !path.exists() {
            return Err(Error::MissingTrajectory(entry.file.clone()));
        }
        let bytes = fs::read(&path)?;
        if hex_digest(&bytes) != entry.sha256 {
            return Err(Error::Integrity(format!(
                "{} does not match its manifest hash",
                entry.file
            )));
        }
        trajectories.push(Trajectory::read(&path)?);
        draws.push(entry.draw);
    }
    Ok(Dataset {
        spec: manifest.spec,
        modes: manifest.modes,
        spec_hash: manifest.spec_hash,
        draws,
        trajectories,
    })
}
