//! String parameters, modal operators, mode shapes and excitation.
//!
//! A stiff, lossy string with simply supported ends is reduced to five scaled
//! parameters {gamma, kappa, nu, sigma0, sigma1_hat} plus a mode count. All
//! modal operators are diagonal and stored as vectors; only the DCT matrix
//! used by the spectral nonlinearity is dense.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::dct_matrix;

/// Physical description of a round string.
///
/// Cross-sectional area and moment of inertia are derived internally from the
/// radius (A = pi r^2, I = pi r^4 / 4).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalStringParams {
    /// Length (m).
    pub length: f64,
    /// Material density (kg/m^3).
    pub density: f64,
    /// Radius (m).
    pub radius: f64,
    /// Tension (N).
    pub tension: f64,
    /// Young's modulus (N/m^2).
    pub young_modulus: f64,
    /// Frequency-independent loss (1/s).
    pub sigma0: f64,
    /// Frequency-dependent loss (m^2/s).
    pub sigma1: f64,
}

impl PhysicalStringParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("length", self.length),
            ("density", self.density),
            ("radius", self.radius),
            ("tension", self.tension),
            ("young_modulus", self.young_modulus),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be strictly positive, got {value}"
                )));
            }
        }
        if self.sigma0 < 0.0 || self.sigma1 < 0.0 {
            return Err(Error::InvalidParameter(
                "loss parameters sigma0, sigma1 must be non-negative".into(),
            ));
        }
        let area = PI * self.radius * self.radius;
        if self.young_modulus * area < self.tension {
            return Err(Error::InvalidParameter(format!(
                "E*A = {} must not be below the tension {} (nonlinearity strength would be imaginary)",
                self.young_modulus * area,
                self.tension
            )));
        }
        Ok(())
    }

    /// Cross-sectional area A = pi r^2 (m^2).
    pub fn area(&self) -> f64 {
        PI * self.radius * self.radius
    }

    /// Moment of inertia I = pi r^4 / 4 (m^4).
    pub fn moment_of_inertia(&self) -> f64 {
        0.25 * PI * self.radius.powi(4)
    }
}

/// The five-parameter scaled string plus mode count.
///
/// Positions and displacements are normalised by the length, so gamma plays
/// the role of a scaled wave speed and the fundamental frequency in Hz is
/// gamma / 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledStringParams {
    /// Scaled wave speed (1/s).
    pub gamma: f64,
    /// Scaled stiffness (1/s).
    pub kappa: f64,
    /// Nonlinearity strength (1/s).
    pub nu: f64,
    /// Frequency-independent loss (1/s).
    pub sigma0: f64,
    /// Scaled frequency-dependent loss (1/s).
    pub sigma1_hat: f64,
    /// Number of retained modes.
    pub modes: usize,
}

impl ScaledStringParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma must be strictly positive, got {}",
                self.gamma
            )));
        }
        if self.nu < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "nu must be non-negative, got {}",
                self.nu
            )));
        }
        if self.kappa < 0.0 || self.sigma0 < 0.0 || self.sigma1_hat < 0.0 {
            return Err(Error::InvalidParameter(
                "kappa, sigma0, sigma1_hat must be non-negative".into(),
            ));
        }
        if self.modes == 0 {
            return Err(Error::InvalidParameter("mode count must be >= 1".into()));
        }
        Ok(())
    }

    /// Fundamental frequency gamma / 2 in Hz.
    pub fn fundamental_hz(&self) -> f64 {
        0.5 * self.gamma
    }
}

/// Diagonal modal operators plus the DCT matrix shared with the spectral
/// nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalOperators {
    /// Modal wavenumbers, entry m-1 equals m*pi.
    pub wavenumbers: DVector<f64>,
    /// Loss diagonal Sigma = sigma0 + sigma1_hat * B^2.
    pub sigma: DVector<f64>,
    /// Squared modal frequencies Omega^2 = gamma^2 B^2 + kappa^2 B^4.
    pub omega2: DVector<f64>,
    /// Truncated orthonormal DCT-II matrix, M x (M+1).
    pub dct: DMatrix<f64>,
}

impl ModalOperators {
    pub fn modes(&self) -> usize {
        self.wavenumbers.len()
    }

    /// Largest modal angular frequency sqrt(Omega^2_M).
    pub fn omega_max(&self) -> f64 {
        self.omega2[self.omega2.len() - 1].sqrt()
    }
}

/// Pluck excitation and output pickup position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExcitationParams {
    /// Amplitude in scaled force units.
    pub famp: f64,
    /// Excitation duration (s).
    pub te: f64,
    /// Excitation position in (0, 1).
    pub xe: f64,
    /// Output position in (0, 1).
    pub xo: f64,
}

impl ExcitationParams {
    pub fn validate(&self) -> Result<()> {
        if self.famp < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "famp must be non-negative, got {}",
                self.famp
            )));
        }
        if !(self.te > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "te must be strictly positive, got {}",
                self.te
            )));
        }
        for (name, x) in [("xe", self.xe), ("xo", self.xo)] {
            if !(x > 0.0 && x < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must lie strictly inside (0, 1), got {x}"
                )));
            }
        }
        Ok(())
    }
}

/// Convert physical string parameters to the scaled five-parameter set.
///
/// gamma = sqrt(T0/(rho A)) / L, kappa = sqrt(E I/(rho A)) / L^2,
/// nu = gamma sqrt((alpha^2 - 1)/2) with alpha = sqrt(E A / T0),
/// sigma1_hat = sigma1 / L^2.
pub fn scale_physical_params(p: &PhysicalStringParams, modes: usize) -> Result<ScaledStringParams> {
    p.validate()?;
    if modes == 0 {
        return Err(Error::InvalidParameter("mode count must be >= 1".into()));
    }
    let area = p.area();
    let inertia = p.moment_of_inertia();
    let lin_density = p.density * area;
    let gamma = (p.tension / lin_density).sqrt() / p.length;
    let kappa = (p.young_modulus * inertia / lin_density).sqrt() / (p.length * p.length);
    let alpha2 = p.young_modulus * area / p.tension;
    let nu = gamma * (0.5 * (alpha2 - 1.0)).sqrt();
    Ok(ScaledStringParams {
        gamma,
        kappa,
        nu,
        sigma0: p.sigma0,
        sigma1_hat: p.sigma1 / (p.length * p.length),
        modes,
    })
}

/// Build the diagonal loss and frequency operators and the DCT matrix.
pub fn build_modal_operators(s: &ScaledStringParams) -> Result<ModalOperators> {
    s.validate()?;
    let m = s.modes;
    let wavenumbers = DVector::from_fn(m, |i, _| (i + 1) as f64 * PI);
    let sigma = wavenumbers.map(|b| s.sigma0 + s.sigma1_hat * b * b);
    let omega2 = wavenumbers.map(|b| {
        let b2 = b * b;
        s.gamma * s.gamma * b2 + s.kappa * s.kappa * b2 * b2
    });
    Ok(ModalOperators {
        wavenumbers,
        sigma,
        omega2,
        dct: dct_matrix(m),
    })
}

/// Mode shapes Phi_m(x) = sqrt(2) sin(m pi x) of the simply supported string.
pub fn mode_shape(x: f64, modes: usize) -> Result<DVector<f64>> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::InvalidArgument(format!(
            "position must lie in [0, 1], got {x}"
        )));
    }
    Ok(DVector::from_fn(modes, |i, _| {
        std::f64::consts::SQRT_2 * ((i + 1) as f64 * PI * x).sin()
    }))
}

/// Raised-cosine pluck force.
///
/// Returns famp/2 * (1 - cos(pi t / Te)) on the closed interval [0, Te] and
/// zero outside; the value at exactly t = Te is famp.
pub fn excitation_force(t: f64, e: &ExcitationParams) -> f64 {
    if t < 0.0 || t > e.te {
        0.0
    } else {
        0.5 * e.famp * (1.0 - (PI * t / e.te).cos())
    }
}

/// Outcome of the explicit-scheme stability test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport {
    pub stable: bool,
    /// 2/k - sqrt(Omega^2_M); positive iff stable.
    pub margin: f64,
}

/// The scheme is stable iff the largest modal frequency stays strictly below
/// 2/k.
pub fn check_stability(ops: &ModalOperators, k: f64) -> StabilityReport {
    debug_assert!(k > 0.0);
    let omega_max = ops.omega_max();
    let limit = 2.0 / k;
    StabilityReport {
        stable: omega_max < limit,
        margin: limit - omega_max,
    }
}
