//! Learnable gradient field with a closed-form non-negative potential.
//!
//! A single hidden layer with shared transposed weights parameterises the
//! gradient of a scalar potential directly:
//!
//!   f(q) = -W^T (alpha .* sigma(z)),   z = beta .* (W q) + b,
//!   V(q) = sum_i (alpha_i / beta_i) phi(z_i),
//!
//! where sigma is a leaky ReLU, phi its antiderivative with phi(0) = 0, and
//! alpha, beta are kept positive by learning their logarithms. Because f is
//! an exact gradient the Jacobian of f is symmetric, and because phi >= 0 and
//! alpha, beta > 0 the potential is non-negative, which the SAV scheme
//! requires.
//!
//! The reverse-mode building blocks (`vjp_input`, `vjp_params`,
//! `potential_param_grads`) are analytic; the training engine assembles them
//! into the backward pass through the solver.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::spectral::PotentialField;

const CHECKPOINT_MAGIC: &[u8; 4] = b"GNCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Parameters of the gradient network.
#[derive(Debug, Clone, PartialEq)]
pub struct GradNetParams {
    /// H x M weight matrix shared between the forward and transposed maps.
    pub w: DMatrix<f64>,
    /// Hidden bias.
    pub b: DVector<f64>,
    /// Log of the output scaling vector alpha.
    pub log_alpha: DVector<f64>,
    /// Log of the input scaling vector beta.
    pub log_beta: DVector<f64>,
    /// Negative slope of the leaky ReLU.
    pub neg_slope: f64,
}

impl GradNetParams {
    pub fn hidden_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn modes(&self) -> usize {
        self.w.ncols()
    }

    pub fn alpha(&self) -> DVector<f64> {
        self.log_alpha.map(f64::exp)
    }

    pub fn beta(&self) -> DVector<f64> {
        self.log_beta.map(f64::exp)
    }

    /// alpha_i / beta_i computed as exp(log_alpha - log_beta); never divides.
    pub fn alpha_over_beta(&self) -> DVector<f64> {
        DVector::from_fn(self.hidden_dim(), |i, _| {
            (self.log_alpha[i] - self.log_beta[i]).exp()
        })
    }

    fn check_input(&self, q: &DVector<f64>) -> Result<()> {
        if q.len() != self.modes() {
            return Err(Error::DimensionMismatch(format!(
                "gradnet expects {} modes, got {}",
                self.modes(),
                q.len()
            )));
        }
        Ok(())
    }
}

/// Leaky ReLU; the derivative at zero takes the positive-branch value 1.
fn leaky_relu(x: f64, neg_slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        neg_slope * x
    }
}

fn leaky_relu_deriv(x: f64, neg_slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        neg_slope
    }
}

/// Antiderivative of the leaky ReLU with phi(0) = 0; non-negative.
fn leaky_relu_antideriv(x: f64, neg_slope: f64) -> f64 {
    if x >= 0.0 {
        0.5 * x * x
    } else {
        0.5 * neg_slope * x * x
    }
}

/// Forward-pass cache reused by the reverse-mode products.
#[derive(Debug, Clone)]
pub struct GradNetTape {
    /// Input the tape was recorded at.
    pub q: DVector<f64>,
    /// W q.
    pub wq: DVector<f64>,
    /// Pre-activation beta .* Wq + b.
    pub z: DVector<f64>,
    /// sigma(z).
    pub sig: DVector<f64>,
    /// sigma'(z).
    pub dsig: DVector<f64>,
    /// exp(log_alpha), cached once per forward pass.
    pub alpha: DVector<f64>,
    /// exp(log_beta).
    pub beta: DVector<f64>,
    /// exp(log_alpha - log_beta).
    pub ratio: DVector<f64>,
}

/// Gradients with respect to every learnable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradNetGrads {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub log_alpha: DVector<f64>,
    pub log_beta: DVector<f64>,
}

impl GradNetGrads {
    pub fn zeros(hidden: usize, modes: usize) -> Self {
        Self {
            w: DMatrix::zeros(hidden, modes),
            b: DVector::zeros(hidden),
            log_alpha: DVector::zeros(hidden),
            log_beta: DVector::zeros(hidden),
        }
    }

    pub fn zeros_like(params: &GradNetParams) -> Self {
        Self::zeros(params.hidden_dim(), params.modes())
    }

    pub fn add_assign(&mut self, other: &GradNetGrads) {
        self.w += &other.w;
        self.b += &other.b;
        self.log_alpha += &other.log_alpha;
        self.log_beta += &other.log_beta;
    }

    pub fn scale(&mut self, factor: f64) {
        self.w *= factor;
        self.b *= factor;
        self.log_alpha *= factor;
        self.log_beta *= factor;
    }

    /// Largest absolute entry across all parameter blocks.
    pub fn amax(&self) -> f64 {
        self.w
            .amax()
            .max(self.b.amax())
            .max(self.log_alpha.amax())
            .max(self.log_beta.amax())
    }
}

fn record_tape(params: &GradNetParams, q: &DVector<f64>) -> GradNetTape {
    let wq = &params.w * q;
    let alpha = params.alpha();
    let beta = params.beta();
    let ratio = params.alpha_over_beta();
    let z = wq.component_mul(&beta) + &params.b;
    let sig = z.map(|x| leaky_relu(x, params.neg_slope));
    let dsig = z.map(|x| leaky_relu_deriv(x, params.neg_slope));
    GradNetTape {
        q: q.clone(),
        wq,
        z,
        sig,
        dsig,
        alpha,
        beta,
        ratio,
    }
}

fn force_from_tape(params: &GradNetParams, tape: &GradNetTape) -> DVector<f64> {
    let scaled = tape.alpha.component_mul(&tape.sig);
    -params.w.tr_mul(&scaled)
}

fn potential_from_tape(params: &GradNetParams, tape: &GradNetTape) -> f64 {
    tape.z
        .iter()
        .zip(tape.ratio.iter())
        .map(|(&z, &r)| r * leaky_relu_antideriv(z, params.neg_slope))
        .sum()
}

/// f(q) = -W^T (alpha .* sigma(beta .* Wq + b)).
pub fn force(params: &GradNetParams, q: &DVector<f64>) -> Result<DVector<f64>> {
    params.check_input(q)?;
    let tape = record_tape(params, q);
    Ok(force_from_tape(params, &tape))
}

/// V(q) = sum_i (alpha_i / beta_i) phi(z_i); non-negative for all inputs.
pub fn potential(params: &GradNetParams, q: &DVector<f64>) -> Result<f64> {
    params.check_input(q)?;
    let tape = record_tape(params, q);
    Ok(potential_from_tape(params, &tape))
}

/// Forward pass returning force, potential and the tape for reverse passes.
pub fn force_potential_tape(
    params: &GradNetParams,
    q: &DVector<f64>,
) -> Result<(DVector<f64>, f64, GradNetTape)> {
    params.check_input(q)?;
    let tape = record_tape(params, q);
    let f = force_from_tape(params, &tape);
    let v = potential_from_tape(params, &tape);
    Ok((f, v, tape))
}

fn debug_assert_tape_fresh(params: &GradNetParams, tape: &GradNetTape, q: &DVector<f64>) {
    debug_assert_eq!(tape.q.len(), params.modes(), "tape/params shape mismatch");
    debug_assert_eq!(&tape.q, q, "stale tape: recorded input differs");
}

/// (df/dq)^T upstream = -W^T diag(alpha .* sigma'(z) .* beta) W upstream.
///
/// The Jacobian is symmetric, so this is also the Jacobian-vector product.
pub fn vjp_input(
    params: &GradNetParams,
    q: &DVector<f64>,
    tape: &GradNetTape,
    upstream: &DVector<f64>,
) -> DVector<f64> {
    debug_assert_tape_fresh(params, tape, q);
    let wu = &params.w * upstream;
    let diag = tape
        .alpha
        .component_mul(&tape.dsig)
        .component_mul(&tape.beta);
    -params.w.tr_mul(&diag.component_mul(&wu))
}

/// Accumulate `scale` times the gradients of upstream^T f(q) into `out`.
///
/// Writing into an existing accumulator keeps the per-step reverse pass free
/// of H x M allocations.
pub fn vjp_params_into(
    params: &GradNetParams,
    q: &DVector<f64>,
    tape: &GradNetTape,
    upstream: &DVector<f64>,
    scale: f64,
    out: &mut GradNetGrads,
) {
    debug_assert_tape_fresh(params, tape, q);
    let wu = &params.w * upstream;
    // dS/dz_i = -alpha_i sigma'(z_i) (W u)_i
    let s = -tape.alpha.component_mul(&tape.dsig).component_mul(&wu);
    // dS/dW = -(alpha .* sigma(z)) u^T + (s .* beta) q^T
    let a_sig = tape.alpha.component_mul(&tape.sig);
    let s_beta = s.component_mul(&tape.beta);
    out.w.gemm(-scale, &a_sig, &upstream.transpose(), 1.0);
    out.w.gemm(scale, &s_beta, &q.transpose(), 1.0);
    for i in 0..params.hidden_dim() {
        out.b[i] += scale * s[i];
        out.log_alpha[i] += scale * -a_sig[i] * wu[i];
        out.log_beta[i] += scale * s_beta[i] * tape.wq[i];
    }
}

/// Gradients of upstream^T f(q) with respect to all parameters, including the
/// chain through the log parameterisation of alpha and beta.
pub fn vjp_params(
    params: &GradNetParams,
    q: &DVector<f64>,
    tape: &GradNetTape,
    upstream: &DVector<f64>,
) -> GradNetGrads {
    let mut out = GradNetGrads::zeros_like(params);
    vjp_params_into(params, q, tape, upstream, 1.0, &mut out);
    out
}

/// Accumulate `scale` times the parameter gradients of the potential V(q)
/// into `out`.
pub fn potential_param_grads_into(
    params: &GradNetParams,
    q: &DVector<f64>,
    tape: &GradNetTape,
    scale: f64,
    out: &mut GradNetGrads,
) {
    debug_assert_tape_fresh(params, tape, q);
    // dV/dW = (alpha .* sigma(z)) q^T  (the beta factors cancel)
    let a_sig = tape.alpha.component_mul(&tape.sig);
    out.w.gemm(scale, &a_sig, &q.transpose(), 1.0);
    for i in 0..params.hidden_dim() {
        let phi = leaky_relu_antideriv(tape.z[i], params.neg_slope);
        // dV/dz_i = (alpha_i / beta_i) sigma(z_i)
        out.b[i] += scale * tape.ratio[i] * tape.sig[i];
        out.log_alpha[i] += scale * tape.ratio[i] * phi;
        out.log_beta[i] += scale * (-tape.ratio[i] * phi + a_sig[i] * tape.wq[i]);
    }
}

/// Gradients of the potential V(q) with respect to all parameters.
pub fn potential_param_grads(
    params: &GradNetParams,
    q: &DVector<f64>,
    tape: &GradNetTape,
) -> GradNetGrads {
    let mut out = GradNetGrads::zeros_like(params);
    potential_param_grads_into(params, q, tape, 1.0, &mut out);
    out
}

/// Kaiming-normal initialisation for W (fan-in mode, leaky-ReLU gain), zero
/// biases and log scalings drawn around zero.
pub fn init<R: Rng + ?Sized>(
    modes: usize,
    hidden: usize,
    neg_slope: f64,
    rng: &mut R,
) -> GradNetParams {
    assert!(hidden >= 1 && modes >= 1);
    let gain = (2.0 / (1.0 + neg_slope * neg_slope)).sqrt();
    let w_std = gain / (modes as f64).sqrt();
    let w_dist = Normal::new(0.0, w_std).expect("valid normal");
    let log_dist = Normal::new(0.0, 0.01).expect("valid normal");
    let w = DMatrix::from_fn(hidden, modes, |_, _| w_dist.sample(rng));
    let log_alpha = DVector::from_fn(hidden, |_, _| log_dist.sample(rng));
    let log_beta = DVector::from_fn(hidden, |_, _| log_dist.sample(rng));
    GradNetParams {
        w,
        b: DVector::zeros(hidden),
        log_alpha,
        log_beta,
        neg_slope,
    }
}

/// View of GradNet parameters as a [`PotentialField`] for the solver.
#[derive(Debug, Clone, Copy)]
pub struct GradNetField<'a> {
    params: &'a GradNetParams,
}

impl<'a> GradNetField<'a> {
    pub fn new(params: &'a GradNetParams) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &GradNetParams {
        self.params
    }
}

impl PotentialField for GradNetField<'_> {
    fn potential(&self, q: &DVector<f64>) -> f64 {
        potential(self.params, q).expect("dimension checked by caller")
    }

    fn force(&self, q: &DVector<f64>) -> DVector<f64> {
        force(self.params, q).expect("dimension checked by caller")
    }

    fn force_and_potential(&self, q: &DVector<f64>) -> (DVector<f64>, f64) {
        let (f, v, _) = force_potential_tape(self.params, q).expect("dimension checked by caller");
        (f, v)
    }
}

fn write_f64_slice<W: Write>(out: &mut W, values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Write a checkpoint: magic "GNCK", version, M, H, neg_slope, then W
/// (row-major), b, log_alpha, log_beta as little-endian f64.
pub fn write_checkpoint(params: &GradNetParams, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(params.modes() as u32).to_le_bytes())?;
    out.write_all(&(params.hidden_dim() as u32).to_le_bytes())?;
    out.write_all(&params.neg_slope.to_le_bytes())?;
    let (h, m) = (params.hidden_dim(), params.modes());
    write_f64_slice(
        &mut out,
        (0..h).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| params.w[(i, j)]),
    )?;
    write_f64_slice(&mut out, params.b.iter().copied())?;
    write_f64_slice(&mut out, params.log_alpha.iter().copied())?;
    write_f64_slice(&mut out, params.log_beta.iter().copied())?;
    out.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`write_checkpoint`]; bit-exact round trip.
pub fn read_checkpoint(path: &Path) -> Result<GradNetParams> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:?} in {}",
            path.display()
        )));
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let m = read_u32(&mut input)? as usize;
    let h = read_u32(&mut input)? as usize;
    if m == 0 || h == 0 {
        return Err(Error::Format("checkpoint with empty dimensions".into()));
    }
    let neg_slope = read_f64(&mut input)?;
    let mut w = DMatrix::zeros(h, m);
    for i in 0..h {
        for j in 0..m {
            w[(i, j)] = read_f64(&mut input)?;
        }
    }
    let mut read_vec = |len: usize| -> Result<DVector<f64>> {
        let mut v = DVector::zeros(len);
        for i in 0..len {
            v[i] = read_f64(&mut input)?;
        }
        Ok(v)
    };
    let b = read_vec(h)?;
    let log_alpha = read_vec(h)?;
    let log_beta = read_vec(h)?;
    Ok(GradNetParams {
        w,
        b,
        log_alpha,
        log_beta,
        neg_slope,
    })
}
