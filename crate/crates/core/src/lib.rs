//! Modal synthesis of nonlinear transverse string vibration.
//!
//! The library decomposes a stiff, lossy string into its modes and integrates
//! the coupled modal system with an explicit, provably stable scalar auxiliary
//! variable (SAV) scheme. The nonlinear coupling force between the modes is
//! either a closed-form spectral oracle or a trainable gradient network with a
//! non-negative closed-form potential, so the same solver serves both as a
//! ground-truth simulator and as a differentiable model that learns the
//! nonlinearity from data.
//!
//! Module map:
//! - [`string`]: physical/scaled string parameters, modal operators, mode
//!   shapes, pluck excitation and the stability check.
//! - [`spectral`]: the DCT-based spectral nonlinearity (oracle force and
//!   potential) and the [`spectral::PotentialField`] capability.
//! - [`gradnet`]: the learnable gradient field, its potential, analytic
//!   vector-Jacobian products and checkpoint serialisation.
//! - [`solver`]: the SAV time stepper, Sherman-Morrison velocity solve,
//!   numerical energy and trajectory recording/serialisation.
//! - [`train`]: teacher-forced segmentation, the hand-rolled reverse pass
//!   through the solver, Adam and the training loop.
//! - [`dataset`]: synthetic dataset generation, persistence and integrity
//!   checks.
//! - [`metrics`]: relative error metrics and dataset-level evaluation against
//!   the linear baseline.
//! - [`audio`]: WAV rendering, spectrogram export and fundamental estimation.

pub mod audio;
pub mod dataset;
pub mod error;
pub mod gradnet;
pub mod metrics;
pub mod solver;
pub mod spectral;
pub mod string;
pub mod train;

pub use error::{Error, Result};
