//! Explicit, energy-stable SAV time stepping for the modal string system.
//!
//! The potential is quadratised through the auxiliary variable
//! psi = sqrt(2 V(q) + eps), which turns the nonlinear force into a bilinear
//! coupling g psi with g = grad_q psi. One step advances
//! (q^n, p^n, psi^n) -> (q^n+1, p^n+1, psi^n+1) in four stages: a half-step
//! of q, an implicit velocity solve against a diagonal-plus-rank-one matrix
//! (made explicit by the Sherman-Morrison formula), the second half-step of
//! q, and the psi update with the averaged velocity. The scheme conserves a
//! discrete energy when losses, forcing and the drift-control gain are zero,
//! and is stable under the linear condition sqrt(Omega^2_M) < 2/k.
//!
//! A control term g_mod steers psi back towards sqrt(2 V(q) + eps) to
//! suppress the slow drift between the auxiliary variable and the true
//! potential in discrete time.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::spectral::PotentialField;
use crate::string::{check_stability, excitation_force, mode_shape, ExcitationParams, ModalOperators};

const TRAJECTORY_MAGIC: &[u8; 4] = b"MTRJ";
const TRAJECTORY_VERSION: u32 = 1;

/// State of the solver at an integer time step.
///
/// `q` holds modal displacements at time t^n (the average of the surrounding
/// half-grid values), `p` modal velocities, `psi` the auxiliary variable.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub q: DVector<f64>,
    pub p: DVector<f64>,
    pub psi: f64,
}

impl SolverState {
    /// Rest state with a psi consistent with zero potential.
    pub fn rest(modes: usize, eps: f64) -> Self {
        Self {
            q: DVector::zeros(modes),
            p: DVector::zeros(modes),
            psi: eps.sqrt(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.psi.is_finite()
            && self.q.iter().all(|x| x.is_finite())
            && self.p.iter().all(|x| x.is_finite())
    }
}

/// Time step and SAV constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Time step in seconds.
    pub k: f64,
    /// Gauge constant keeping psi and g_std defined at zero potential.
    pub eps: f64,
    /// Drift-control gain; zero disables the control term.
    pub lambda0: f64,
    /// Below this L1 norm of p the control term is zeroed.
    pub p_l1_tolerance: f64,
}

impl SolverConfig {
    pub fn new(k: f64) -> Self {
        Self {
            k,
            eps: 1e-12,
            lambda0: 1.0,
            p_l1_tolerance: 1e-14,
        }
    }

    pub fn from_sample_rate(fs: f64) -> Self {
        Self::new(1.0 / fs)
    }

    pub fn with_lambda0(mut self, lambda0: f64) -> Self {
        self.lambda0 = lambda0;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }
}

/// psi = sqrt(2 V + eps). The potential must be non-negative; non-finite
/// values pass through and are caught by the divergence check.
pub fn quadratise(potential: f64, eps: f64) -> f64 {
    assert!(
        !(potential < 0.0),
        "potential field broke non-negativity: V = {potential}"
    );
    (2.0 * potential + eps).sqrt()
}

/// g_std(q) = grad_q sqrt(2 V(q) + eps) = -f(q) / sqrt(2 V(q) + eps).
pub fn g_std<F: PotentialField + ?Sized>(q: &DVector<f64>, field: &F, eps: f64) -> DVector<f64> {
    let (f, v) = field.force_and_potential(q);
    let psi = quadratise(v, eps);
    -f / psi
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

/// Drift-control term
/// g_mod = -lambda0 (psi - sqrt(2 V(q) + eps)) sign(p) / (sign(p)^T p).
///
/// The denominator equals the L1 norm of p; below `p_l1_tolerance` the term
/// is defined as zero.
pub fn g_mod<F: PotentialField + ?Sized>(
    q: &DVector<f64>,
    p: &DVector<f64>,
    psi: f64,
    field: &F,
    cfg: &SolverConfig,
) -> DVector<f64> {
    if cfg.lambda0 == 0.0 {
        return DVector::zeros(q.len());
    }
    let l1: f64 = p.iter().map(|x| x.abs()).sum();
    if l1 < cfg.p_l1_tolerance {
        return DVector::zeros(q.len());
    }
    let gap = psi - quadratise(field.potential(q), cfg.eps);
    let scale = -cfg.lambda0 * gap / l1;
    p.map(|x| scale * sign(x))
}

/// Solve [I + k Sigma + c g g^T] x = rhs with diagonal Sigma using the
/// Sherman-Morrison formula. Requires c >= 0, so the rank-one denominator is
/// at least one.
pub fn sherman_morrison_apply(
    sigma: &DVector<f64>,
    c: f64,
    g: &DVector<f64>,
    rhs: &DVector<f64>,
    k: f64,
) -> DVector<f64> {
    debug_assert!(c >= 0.0);
    let a_inv = sigma.map(|s| 1.0 / (1.0 + k * s));
    let y = rhs.component_mul(&a_inv);
    if c == 0.0 {
        return y;
    }
    let u = g.component_mul(&a_inv);
    let denom = 1.0 + c * g.dot(&u);
    let factor = c * g.dot(&y) / denom;
    y - u * factor
}

/// Discrete energy
/// E^n = p^T p / 2 + (q^{n+1/2})^T Omega^2 (q^{n-1/2}) / 2 + nu^2 psi^2 / 2.
pub fn energy(
    q_half_prev: &DVector<f64>,
    q_half_next: &DVector<f64>,
    p: &DVector<f64>,
    psi: f64,
    ops: &ModalOperators,
    nu: f64,
) -> f64 {
    let kinetic = 0.5 * p.dot(p);
    let potential: f64 = (0..ops.modes())
        .map(|i| 0.5 * q_half_next[i] * ops.omega2[i] * q_half_prev[i])
        .sum();
    kinetic + potential + 0.5 * nu * nu * psi * psi
}

/// Energy evaluated from an integer-time state; the half-grid displacements
/// are reconstructed as q -+ (k/2) p.
pub fn energy_at_state(state: &SolverState, ops: &ModalOperators, nu: f64, k: f64) -> f64 {
    let q_half_prev = &state.q - &state.p * (0.5 * k);
    let q_half_next = &state.q + &state.p * (0.5 * k);
    energy(&q_half_prev, &q_half_next, &state.p, state.psi, ops, nu)
}

/// Time series of states with audio output and generation metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Sampling rate (1/k) in Hz.
    pub fs: f64,
    pub exc: ExcitationParams,
    /// Drift-control gain active while the trajectory was produced.
    pub lambda0: f64,
    /// States are stored every `state_stride` samples; audio is always dense.
    pub state_stride: usize,
    pub q: Vec<DVector<f64>>,
    pub p: Vec<DVector<f64>>,
    pub psi: Vec<f64>,
    /// Audio output w^n = Phi^T(x_o) q^n at every sample.
    pub w: Vec<f64>,
}

impl Trajectory {
    pub fn modes(&self) -> usize {
        self.q.first().map_or(0, |q| q.len())
    }

    /// Number of audio samples (time grid length).
    pub fn samples(&self) -> usize {
        self.w.len()
    }

    pub fn state_count(&self) -> usize {
        self.q.len()
    }

    pub fn state_at(&self, index: usize) -> SolverState {
        SolverState {
            q: self.q[index].clone(),
            p: self.p[index].clone(),
            psi: self.psi[index],
        }
    }

    /// Write the binary container: magic "MTRJ", version, dimensions,
    /// sampling and excitation metadata, then q, p, psi, w as little-endian
    /// f64. Round trips are bit-exact.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(TRAJECTORY_MAGIC)?;
        out.write_all(&TRAJECTORY_VERSION.to_le_bytes())?;
        out.write_all(&(self.modes() as u32).to_le_bytes())?;
        out.write_all(&(self.samples() as u64).to_le_bytes())?;
        out.write_all(&(self.state_count() as u64).to_le_bytes())?;
        out.write_all(&(self.state_stride as u32).to_le_bytes())?;
        for v in [
            self.fs,
            self.exc.famp,
            self.exc.te,
            self.exc.xe,
            self.exc.xo,
            self.lambda0,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        for q in &self.q {
            for &x in q.iter() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        for p in &self.p {
            for &x in p.iter() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        for &x in &self.psi {
            out.write_all(&x.to_le_bytes())?;
        }
        for &x in &self.w {
            out.write_all(&x.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != TRAJECTORY_MAGIC {
            return Err(Error::Format(format!(
                "bad trajectory magic {magic:?} in {}",
                path.display()
            )));
        }
        let version = read_u32(&mut input)?;
        if version != TRAJECTORY_VERSION {
            return Err(Error::Format(format!(
                "unsupported trajectory version {version}"
            )));
        }
        let modes = read_u32(&mut input)? as usize;
        let samples = read_u64(&mut input)? as usize;
        let states = read_u64(&mut input)? as usize;
        let state_stride = read_u32(&mut input)? as usize;
        let fs = read_f64(&mut input)?;
        let famp = read_f64(&mut input)?;
        let te = read_f64(&mut input)?;
        let xe = read_f64(&mut input)?;
        let xo = read_f64(&mut input)?;
        let lambda0 = read_f64(&mut input)?;
        let mut read_states = |count: usize| -> Result<Vec<DVector<f64>>> {
            (0..count)
                .map(|_| {
                    let mut v = DVector::zeros(modes);
                    for i in 0..modes {
                        v[i] = read_f64(&mut input)?;
                    }
                    Ok(v)
                })
                .collect()
        };
        let q = read_states(states)?;
        let p = read_states(states)?;
        let mut psi = vec![0.0; states];
        for x in psi.iter_mut() {
            *x = read_f64(&mut input)?;
        }
        let mut w = vec![0.0; samples];
        for x in w.iter_mut() {
            *x = read_f64(&mut input)?;
        }
        Ok(Self {
            fs,
            exc: ExcitationParams { famp, te, xe, xo },
            lambda0,
            state_stride,
            q,
            p,
            psi,
            w,
        })
    }
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

/// Options for [`SavSolver::simulate_with`].
#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    /// Number of recorded samples including the initial state.
    pub samples: usize,
    /// Store every r-th state (audio stays dense); 1 keeps everything.
    pub state_stride: usize,
    /// Shift of the excitation clock, used when restarting mid-trajectory.
    pub t_offset: f64,
}

impl SimOptions {
    pub fn dense(samples: usize) -> Self {
        Self {
            samples,
            state_stride: 1,
            t_offset: 0.0,
        }
    }
}

/// Completes a step given the field evaluations at the half-grid point.
///
/// Shared by the plain stepper and the training forward pass so both advance
/// states identically. Returns the new state together with the assembled
/// coupling vector and the value of psi_half = sqrt(2 V(q^{n+1/2}) + eps).
pub(crate) fn complete_step(
    q_half: &DVector<f64>,
    p: &DVector<f64>,
    psi: f64,
    force_half: &DVector<f64>,
    potential_half: f64,
    g_mod_term: &DVector<f64>,
    ops: &ModalOperators,
    nu: f64,
    cfg: &SolverConfig,
    phi_e: &DVector<f64>,
    fe_half: f64,
) -> (SolverState, DVector<f64>, f64) {
    let k = cfg.k;
    let psi_half = quadratise(potential_half, cfg.eps);
    // g = g_std(q^{n+1/2}) + g_mod(q^n, p^n, psi^n)
    let g = -force_half / psi_half + g_mod_term;
    let c = 0.25 * k * k * nu * nu;
    let nu2 = nu * nu;
    let g_dot_p = g.dot(p);
    let rhs = DVector::from_fn(p.len(), |i, _| {
        (1.0 - k * ops.sigma[i]) * p[i] - c * g[i] * g_dot_p - k * ops.omega2[i] * q_half[i]
            - k * nu2 * g[i] * psi
            + k * phi_e[i] * fe_half
    });
    let p_next = sherman_morrison_apply(&ops.sigma, c, &g, &rhs, k);
    let q_next = q_half + &p_next * (0.5 * k);
    let psi_next = psi + k * 0.5 * (g.dot(p) + g.dot(&p_next));
    (
        SolverState {
            q: q_next,
            p: p_next,
            psi: psi_next,
        },
        g,
        psi_half,
    )
}

/// One solver instance: operators, field, excitation profile and scratch for
/// a sequential rollout. Instances over distinct trajectories run in
/// parallel.
pub struct SavSolver<'a, F: PotentialField + ?Sized> {
    ops: &'a ModalOperators,
    field: &'a F,
    cfg: SolverConfig,
    nu: f64,
    exc: ExcitationParams,
    phi_e: DVector<f64>,
    phi_o: DVector<f64>,
}

impl<'a, F: PotentialField + ?Sized> SavSolver<'a, F> {
    /// Build a solver; fails if the stability bound is violated for the
    /// configured time step.
    pub fn new(
        ops: &'a ModalOperators,
        field: &'a F,
        cfg: SolverConfig,
        nu: f64,
        exc: ExcitationParams,
    ) -> Result<Self> {
        exc.validate()?;
        let report = check_stability(ops, cfg.k);
        if !report.stable {
            return Err(Error::Unstable {
                omega_max: ops.omega_max(),
                limit: 2.0 / cfg.k,
            });
        }
        Ok(Self {
            ops,
            field,
            cfg,
            nu,
            exc,
            phi_e: mode_shape(exc.xe, ops.modes())?,
            phi_o: mode_shape(exc.xo, ops.modes())?,
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn operators(&self) -> &ModalOperators {
        self.ops
    }

    /// Zero displacement and velocity with the auxiliary variable consistent
    /// with the active field: psi = sqrt(2 V(0) + eps).
    pub fn rest_state(&self) -> SolverState {
        let q = DVector::zeros(self.ops.modes());
        let psi = quadratise(self.field.potential(&q), self.cfg.eps);
        SolverState {
            q,
            p: DVector::zeros(self.ops.modes()),
            psi,
        }
    }

    /// Advance one step given the excitation sample at the half-grid time.
    pub fn step(&self, state: &SolverState, fe_half: f64) -> Result<SolverState> {
        let q_half = &state.q + &state.p * (0.5 * self.cfg.k);
        let (force_half, potential_half) = self.field.force_and_potential(&q_half);
        let gm = g_mod(&state.q, &state.p, state.psi, self.field, &self.cfg);
        let (next, _, _) = complete_step(
            &q_half,
            &state.p,
            state.psi,
            &force_half,
            potential_half,
            &gm,
            self.ops,
            self.nu,
            &self.cfg,
            &self.phi_e,
            fe_half,
        );
        if !next.is_finite() {
            return Err(Error::Diverged { step: 0 });
        }
        Ok(next)
    }

    /// Rollout recording every state and the audio output.
    pub fn simulate(&self, initial: &SolverState, samples: usize) -> Result<Trajectory> {
        self.simulate_with(initial, SimOptions::dense(samples))
    }

    pub fn simulate_with(&self, initial: &SolverState, opts: SimOptions) -> Result<Trajectory> {
        let k = self.cfg.k;
        let stride = opts.state_stride.max(1);
        let mut traj = Trajectory {
            fs: 1.0 / k,
            exc: self.exc,
            lambda0: self.cfg.lambda0,
            state_stride: stride,
            q: Vec::new(),
            p: Vec::new(),
            psi: Vec::new(),
            w: Vec::with_capacity(opts.samples),
        };
        let mut state = initial.clone();
        for n in 0..opts.samples {
            if n > 0 {
                let t_half = opts.t_offset + (n as f64 - 0.5) * k;
                let fe = excitation_force(t_half, &self.exc);
                state = self.step(&state, fe).map_err(|e| match e {
                    Error::Diverged { .. } => Error::Diverged { step: n },
                    other => other,
                })?;
            }
            traj.w.push(self.phi_o.dot(&state.q));
            if n % stride == 0 {
                traj.q.push(state.q.clone());
                traj.p.push(state.p.clone());
                traj.psi.push(state.psi);
            }
        }
        Ok(traj)
    }
}
