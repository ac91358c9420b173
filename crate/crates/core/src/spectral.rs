//! Closed-form spectral nonlinearity and the potential-field capability.
//!
//! The coupling force between the modes comes from evaluating the spatial
//! gradient of the displacement on an interleaved grid via a truncated
//! orthonormal DCT-II, applying the pointwise Morse-style potential
//! derivative, and transforming back. The force is exactly the negative
//! gradient of a non-negative potential, which is what makes the SAV
//! quadratisation applicable.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A force field derived from a non-negative scalar potential,
/// force(q) = -grad potential(q).
pub trait PotentialField: Sync {
    fn potential(&self, q: &DVector<f64>) -> f64;
    fn force(&self, q: &DVector<f64>) -> DVector<f64>;

    /// Both values at once; implementations override this to share work.
    fn force_and_potential(&self, q: &DVector<f64>) -> (DVector<f64>, f64) {
        (self.force(q), self.potential(q))
    }
}

/// The trivial field with zero force and zero potential (linear string).
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroField;

impl PotentialField for ZeroField {
    fn potential(&self, _q: &DVector<f64>) -> f64 {
        0.0
    }

    fn force(&self, q: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(q.len())
    }
}

/// Truncated M x (M+1) orthonormal DCT-II matrix.
///
/// Entry (m, l) = sqrt(2/(M+1)) cos(pi m (l + 1/2) / (M+1)) for rows
/// m = 1..M; the constant m = 0 row is excluded.
pub fn dct_matrix(modes: usize) -> DMatrix<f64> {
    let n = (modes + 1) as f64;
    let scale = (2.0 / n).sqrt();
    DMatrix::from_fn(modes, modes + 1, |row, col| {
        let m = (row + 1) as f64;
        let l = col as f64;
        scale * (PI / n * m * (l + 0.5)).cos()
    })
}

/// Interleaved evaluation grid x_{l+1/2} = (l + 1/2)/(M+1) with its DCT.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralGrid {
    modes: usize,
    dct: DMatrix<f64>,
}

impl SpectralGrid {
    pub fn new(modes: usize) -> Self {
        Self {
            modes,
            dct: dct_matrix(modes),
        }
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn dct(&self) -> &DMatrix<f64> {
        &self.dct
    }

    /// Grid point x_{l+1/2}, l = 0..=M.
    pub fn point(&self, l: usize) -> f64 {
        (l as f64 + 0.5) / (self.modes + 1) as f64
    }
}

/// Pointwise potential (sqrt(1 + xi^2) - 1)^2.
///
/// Evaluated as (xi^2 / (sqrt(1 + xi^2) + 1))^2, which is the same function
/// without the catastrophic cancellation at small xi.
pub fn morse_potential(xi: f64) -> f64 {
    let xi2 = xi * xi;
    let d = xi2 / ((1.0 + xi2).sqrt() + 1.0);
    d * d
}

/// Derivative of [`morse_potential`]: 2 (sqrt(1 + xi^2) - 1) xi / sqrt(1 + xi^2),
/// in the cancellation-free form 2 xi^3 / ((sqrt(1 + xi^2) + 1) sqrt(1 + xi^2)).
pub fn morse_potential_deriv(xi: f64) -> f64 {
    let xi2 = xi * xi;
    let root = (1.0 + xi2).sqrt();
    2.0 * xi2 * xi / ((root + 1.0) * root)
}

/// Spatial gradient on the interleaved grid: xi = sqrt(M+1) C^T B q.
///
/// Equals the analytic derivative of the modal superposition evaluated at the
/// grid points.
pub fn spatial_gradient(
    q: &DVector<f64>,
    grid: &SpectralGrid,
    wavenumbers: &DVector<f64>,
) -> Result<DVector<f64>> {
    let m = grid.modes();
    if q.len() != m || wavenumbers.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "expected {m} modes, got q: {}, wavenumbers: {}",
            q.len(),
            wavenumbers.len()
        )));
    }
    let bq = q.component_mul(wavenumbers);
    let mut xi = grid.dct.tr_mul(&bq);
    xi *= ((m + 1) as f64).sqrt();
    Ok(xi)
}

/// The oracle nonlinearity: spectral evaluation of the Morse-style potential.
#[derive(Debug, Clone)]
pub struct SpectralNonlinearity {
    grid: SpectralGrid,
    wavenumbers: DVector<f64>,
}

impl SpectralNonlinearity {
    pub fn new(modes: usize) -> Self {
        Self {
            grid: SpectralGrid::new(modes),
            wavenumbers: DVector::from_fn(modes, |i, _| (i + 1) as f64 * PI),
        }
    }

    pub fn modes(&self) -> usize {
        self.grid.modes()
    }

    pub fn grid(&self) -> &SpectralGrid {
        &self.grid
    }

    fn xi(&self, q: &DVector<f64>) -> DVector<f64> {
        let bq = q.component_mul(&self.wavenumbers);
        let mut xi = self.grid.dct.tr_mul(&bq);
        xi *= ((self.modes() + 1) as f64).sqrt();
        xi
    }

    fn force_from_xi(&self, xi: &DVector<f64>) -> DVector<f64> {
        let vprime = xi.map(morse_potential_deriv);
        let mut f = &self.grid.dct * vprime;
        f.component_mul_assign(&self.wavenumbers);
        f /= -((self.modes() + 1) as f64).sqrt();
        f
    }

    fn potential_from_xi(&self, xi: &DVector<f64>) -> f64 {
        xi.iter().map(|&x| morse_potential(x)).sum::<f64>() / (self.modes() + 1) as f64
    }
}

impl PotentialField for SpectralNonlinearity {
    /// V(q) = sum_l V(xi_{l+1/2}) / (M+1); non-negative by construction.
    fn potential(&self, q: &DVector<f64>) -> f64 {
        self.potential_from_xi(&self.xi(q))
    }

    /// f(q) = -B C V'(xi) / sqrt(M+1).
    fn force(&self, q: &DVector<f64>) -> DVector<f64> {
        self.force_from_xi(&self.xi(q))
    }

    fn force_and_potential(&self, q: &DVector<f64>) -> (DVector<f64>, f64) {
        let xi = self.xi(q);
        (self.force_from_xi(&xi), self.potential_from_xi(&xi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dct_single_mode_entries() {
        let c = dct_matrix(1);
        assert_eq!(c.nrows(), 1);
        assert_eq!(c.ncols(), 2);
        assert_relative_eq!(c[(0, 0)], 0.7071067811865476, max_relative = 1e-15);
        assert_relative_eq!(c[(0, 1)], -0.7071067811865475, max_relative = 1e-15);
    }

    #[test]
    fn dct_rows_exclude_constant_mode() {
        for m in [1usize, 2, 7, 33] {
            let c = dct_matrix(m);
            assert_eq!(c.nrows(), m);
            assert_eq!(c.ncols(), m + 1);
        }
    }

    #[test]
    fn dct_orthonormal_rows() {
        for m in [1usize, 2, 3, 8, 33, 128, 256] {
            let c = dct_matrix(m);
            let gram = &c * c.transpose();
            let mut max_err: f64 = 0.0;
            for i in 0..m {
                for j in 0..m {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    max_err = max_err.max((gram[(i, j)] - expect).abs());
                }
            }
            assert!(max_err < 1e-12, "M = {m}: ||C C^T - I|| = {max_err:e}");
        }
    }

    #[test]
    fn morse_values() {
        assert_eq!(morse_potential(0.0), 0.0);
        assert_eq!(morse_potential_deriv(0.0), 0.0);
        assert_relative_eq!(morse_potential(1.0), 0.17157287525381, max_relative = 1e-12);
    }

    #[test]
    fn morse_derivative_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let xi: f64 = rng.gen_range(-3.0..3.0);
            let h = 1e-6 * (1.0 + xi.abs());
            let fd = (morse_potential(xi + h) - morse_potential(xi - h)) / (2.0 * h);
            let exact = morse_potential_deriv(xi);
            let denom = exact.abs().max(1e-9);
            assert!(
                (fd - exact).abs() / denom < 1e-7,
                "xi = {xi}: fd = {fd}, exact = {exact}"
            );
        }
    }

    #[test]
    fn spatial_gradient_zero_and_single_mode() {
        let grid = SpectralGrid::new(1);
        let b = DVector::from_element(1, PI);
        let xi = spatial_gradient(&DVector::zeros(1), &grid, &b).unwrap();
        assert_eq!(xi, DVector::zeros(2));

        // For M = 1, q = [a]: xi_l = sqrt(2) pi a cos(pi (l+1/2)/2),
        // i.e. [pi a, -pi a].
        let a = 0.37;
        let xi = spatial_gradient(&DVector::from_element(1, a), &grid, &b).unwrap();
        assert_relative_eq!(xi[0], PI * a, max_relative = 1e-14);
        assert_relative_eq!(xi[1], -PI * a, max_relative = 1e-14);
    }

    #[test]
    fn spatial_gradient_matches_analytic_derivative() {
        // xi must equal sum_m q_m sqrt(2) m pi cos(m pi x_{l+1/2}) exactly.
        let m = 9;
        let grid = SpectralGrid::new(m);
        let b = DVector::from_fn(m, |i, _| (i + 1) as f64 * PI);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
        let xi = spatial_gradient(&q, &grid, &b).unwrap();
        for l in 0..=m {
            let x = grid.point(l);
            let analytic: f64 = (0..m)
                .map(|i| {
                    let mm = (i + 1) as f64;
                    q[i] * std::f64::consts::SQRT_2 * mm * PI * (mm * PI * x).cos()
                })
                .sum();
            assert_relative_eq!(xi[l], analytic, max_relative = 1e-10, epsilon = 1e-12);
        }
    }

    #[test]
    fn spatial_gradient_dimension_mismatch() {
        let grid = SpectralGrid::new(3);
        let b = DVector::from_element(3, PI);
        assert!(spatial_gradient(&DVector::zeros(2), &grid, &b).is_err());
    }

    #[test]
    fn oracle_zero_state() {
        let field = SpectralNonlinearity::new(6);
        let q = DVector::zeros(6);
        assert_eq!(field.potential(&q), 0.0);
        assert_eq!(field.force(&q), DVector::zeros(6));
    }

    #[test]
    fn oracle_force_is_negative_potential_gradient() {
        // Central-difference gradient of the potential against the closed
        // form, scale and step as in the gradient-consistency contract.
        for &m in &[2usize, 6, 20] {
            let field = SpectralNonlinearity::new(m);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + m as u64);
            for _ in 0..30 {
                let q = DVector::from_fn(m, |_, _| rng.gen_range(-1e-3..1e-3));
                let (f, _) = field.force_and_potential(&q);
                let h = 1e-6 * 1e-3;
                let mut fd = DVector::zeros(m);
                for i in 0..m {
                    let mut qp = q.clone();
                    let mut qm = q.clone();
                    qp[i] += h;
                    qm[i] -= h;
                    fd[i] = -(field.potential(&qp) - field.potential(&qm)) / (2.0 * h);
                }
                let scale = f.amax().max(1e-30);
                let err = (&fd - &f).amax() / scale;
                assert!(err < 1e-6, "M = {m}: gradient mismatch {err:e}");
            }
        }
    }

    proptest! {
        #[test]
        fn oracle_potential_non_negative(values in proptest::collection::vec(-0.5f64..0.5, 5)) {
            let field = SpectralNonlinearity::new(5);
            let q = DVector::from_vec(values);
            prop_assert!(field.potential(&q) >= 0.0);
        }

        #[test]
        fn oracle_parity(values in proptest::collection::vec(-0.1f64..0.1, 6)) {
            // V is even in xi and xi is linear in q, so V(-q) = V(q) and
            // f(-q) = -f(q).
            let field = SpectralNonlinearity::new(6);
            let q = DVector::from_vec(values);
            let (f_pos, v_pos) = field.force_and_potential(&q);
            let (f_neg, v_neg) = field.force_and_potential(&(-&q));
            prop_assert!((v_pos - v_neg).abs() <= 1e-15 * v_pos.abs().max(1e-300));
            for i in 0..6 {
                let scale = f_pos[i].abs().max(1e-300);
                prop_assert!((f_neg[i] + f_pos[i]).abs() <= 1e-12 * scale.max(1e-18));
            }
        }
    }
}
