//! Eigen-decomposition, Fermi functions, functions of `H`, and the density
//! of states.

use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{PointMass, SpectralMeasure};
use crate::model::{HamiltonianRealization, RealizationMeta};

/// Relative tolerance on eigen-residuals and orthonormality.
pub const EIGEN_TOLERANCE: f64 = 1e-10;

/// Eigenvalue pairs closer than this fraction of the spectral width are
/// treated as degenerate.
pub const DEGENERACY_FRACTION: f64 = 1e-9;

/// Ascending eigenvalues with orthonormal eigenvectors (stored as columns).
#[derive(Clone, Debug)]
pub struct EigenSystem {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Mat<f64>,
    pub meta: RealizationMeta,
}

impl EigenSystem {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn spectral_width(&self) -> f64 {
        match (self.eigenvalues.first(), self.eigenvalues.last()) {
            (Some(lo), Some(hi)) => hi - lo,
            _ => 0.0,
        }
    }

    /// `ε_degen = 1e-9 × spectral width` (with a floor for one-point spectra).
    pub fn degeneracy_tolerance(&self) -> f64 {
        DEGENERACY_FRACTION * self.spectral_width().max(1.0e-300)
    }

    /// Worst relative residual `‖H v_n - E_n v_n‖ / ‖H‖` and worst
    /// orthonormality defect `|<v_n, v_m> - δ_nm|`.
    pub fn residuals(&self, h: &Mat<f64>) -> (f64, f64) {
        let n = self.len();
        let v = &self.eigenvectors;
        let hv = h * v;
        let norm = self
            .eigenvalues
            .iter()
            .fold(0.0f64, |m, e| m.max(e.abs()))
            .max(f64::MIN_POSITIVE);
        let mut residual = 0.0f64;
        for j in 0..n {
            let e = self.eigenvalues[j];
            let r2: f64 = (0..n).map(|i| (hv[(i, j)] - e * v[(i, j)]).powi(2)).sum();
            residual = residual.max(r2.sqrt() / norm);
        }
        let gram = v.transpose() * v;
        let mut ortho = 0.0f64;
        for j in 0..n {
            for i in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                ortho = ortho.max((gram[(i, j)] - target).abs());
            }
        }
        (residual, ortho)
    }

    /// `v_n(x)`: component `site` of eigenvector `n`.
    pub fn component(&self, site: usize, n: usize) -> f64 {
        self.eigenvectors[(site, n)]
    }
}

/// Diagonalizes one realization and verifies the residual and
/// orthonormality bounds.
pub fn diagonalize(h: &HamiltonianRealization) -> Result<EigenSystem> {
    let meta = h.meta;
    let fail = |message: String| Error::Numerical {
        index: meta.realization_index,
        seed: meta.seed,
        message,
    };
    let evd = h
        .matrix
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| fail(format!("eigensolver did not converge: {e:?}")))?;
    let values = evd.S().column_vector();
    let vectors = evd.U();
    let n = h.sites();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| values[k]).collect();
    if eigenvalues.iter().any(|e| !e.is_finite()) {
        return Err(fail("non-finite eigenvalue".into()));
    }
    let eigenvectors = Mat::from_fn(n, n, |i, j| vectors[(i, order[j])]);
    let eig = EigenSystem {
        eigenvalues,
        eigenvectors,
        meta,
    };
    let (residual, ortho) = eig.residuals(&h.matrix);
    if residual > EIGEN_TOLERANCE || ortho > EIGEN_TOLERANCE {
        return Err(fail(format!(
            "eigenpairs out of tolerance: residual {residual:e}, orthonormality {ortho:e}"
        )));
    }
    Ok(eig)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FermiParams {
    pub mu: f64,
    #[serde(rename = "T")]
    pub temperature: f64,
}

impl FermiParams {
    pub fn new(mu: f64, temperature: f64) -> Result<Self> {
        let p = FermiParams { mu, temperature };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() {
            return Err(Error::config("fermi.mu", "chemical potential must be finite"));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::config(
                "fermi.T",
                format!("temperature must be finite and >= 0, got {}", self.temperature),
            ));
        }
        Ok(())
    }

    pub fn is_zero_temperature(&self) -> bool {
        self.temperature == 0.0
    }
}

/// Fermi function. `T = 0` is the indicator of `]-∞, μ]`, evaluated on its
/// own branch rather than as a limit.
pub fn fermi(e: f64, p: FermiParams) -> f64 {
    if p.temperature == 0.0 {
        return if e <= p.mu { 1.0 } else { 0.0 };
    }
    let x = (e - p.mu) / p.temperature;
    // exp is only ever taken of a non-positive argument
    if x > 0.0 {
        let z = (-x).exp();
        z / (1.0 + z)
    } else {
        1.0 / (1.0 + x.exp())
    }
}

/// `(-f)'(E) = 1 / (4T cosh²((E-μ)/2T))`; requires `T > 0`.
pub fn fermi_derivative_weight(e: f64, p: FermiParams) -> Result<f64> {
    if !(p.temperature > 0.0) {
        return Err(Error::Domain(
            "the Fermi derivative weight needs T > 0".into(),
        ));
    }
    Ok(derivative_weight(e, p.mu, p.temperature))
}

pub(crate) fn derivative_weight(e: f64, mu: f64, temperature: f64) -> f64 {
    let z = (-((e - mu) / temperature).abs()).exp();
    z / (temperature * (1.0 + z) * (1.0 + z))
}

/// `Σ_n g(E_n) <v_n, vector> v_n`.
pub fn apply_function_of_h(
    eig: &EigenSystem,
    g: impl Fn(f64) -> f64,
    vector: &[f64],
) -> Result<Vec<f64>> {
    let n = eig.len();
    if vector.len() != n {
        return Err(Error::Input(format!(
            "vector has length {} but the eigensystem has dimension {n}",
            vector.len()
        )));
    }
    let v = &eig.eigenvectors;
    let mut out = vec![0.0; n];
    for (k, &e) in eig.eigenvalues.iter().enumerate() {
        let ge = g(e);
        if ge == 0.0 {
            continue;
        }
        let coeff: f64 = (0..n).map(|i| v[(i, k)] * vector[i]).sum::<f64>() * ge;
        for (i, o) in out.iter_mut().enumerate() {
            *o += coeff * v[(i, k)];
        }
    }
    Ok(out)
}

/// The matrix `g(H) = V diag(g(E)) V^T` in the site basis.
pub fn function_of_h_matrix(eig: &EigenSystem, g: impl Fn(f64) -> f64) -> Mat<f64> {
    let n = eig.len();
    let v = &eig.eigenvectors;
    let gv: Vec<f64> = eig.eigenvalues.iter().map(|&e| g(e)).collect();
    let scaled = Mat::from_fn(n, n, |i, k| v[(i, k)] * gv[k]);
    &scaled * v.transpose()
}

/// Density-of-states surrogate: mass `1/N` at every eigenvalue.
pub fn dos_measure(eig: &EigenSystem) -> SpectralMeasure {
    let w = 1.0 / eig.len() as f64;
    SpectralMeasure::from_points(
        0.0,
        eig.eigenvalues
            .iter()
            .map(|&e| PointMass::new(e, w))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::Bins;
    use crate::model::{assemble_hamiltonian, realize, Boundary, DisorderSpec, LatticeSpec};
    use proptest::prelude::*;

    fn free(d: usize, side: usize, boundary: Boundary) -> EigenSystem {
        let lat = LatticeSpec::new(d, side, boundary).unwrap();
        let h = assemble_hamiltonian(&lat, &vec![0.0; lat.sites()], 0.0).unwrap();
        diagonalize(&h).unwrap()
    }

    #[test]
    fn three_site_eigenvalues() {
        let eig = free(1, 3, Boundary::Dirichlet);
        let s = 2f64.sqrt();
        for (a, b) in eig.eigenvalues.iter().zip([-s, 0.0, s]) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn periodic_ring_matches_fourier_modes() {
        for side in [8usize, 11] {
            let eig = free(1, side, Boundary::Periodic);
            let mut expected: Vec<f64> = (0..side)
                .map(|k| 2.0 * (2.0 * std::f64::consts::PI * k as f64 / side as f64).cos())
                .collect();
            expected.sort_by(f64::total_cmp);
            for (a, b) in eig.eigenvalues.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn periodic_square_matches_fourier_modes() {
        let side = 6;
        let eig = free(2, side, Boundary::Periodic);
        let tau = 2.0 * std::f64::consts::PI / side as f64;
        let mut expected = Vec::new();
        for a in 0..side {
            for b in 0..side {
                expected.push(2.0 * (tau * a as f64).cos() + 2.0 * (tau * b as f64).cos());
            }
        }
        expected.sort_by(f64::total_cmp);
        for (a, b) in eig.eigenvalues.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn free_spectrum_inside_band() {
        for d in 1..=3 {
            let eig = free(d, 4, Boundary::Periodic);
            let band = 2.0 * d as f64 + 1e-12;
            assert!(eig.eigenvalues.iter().all(|e| e.abs() <= band));
        }
    }

    #[test]
    fn reconstructs_hamiltonian() {
        let lat = LatticeSpec::new(2, 6, Boundary::Dirichlet).unwrap();
        let h = realize(&lat, &DisorderSpec::uniform(2.0, 1.0, 5), 2, 4000).unwrap();
        let eig = diagonalize(&h).unwrap();
        assert_eq!(eig.len(), 36);
        assert!(eig.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        let rebuilt = function_of_h_matrix(&eig, |e| e);
        let mut worst = 0.0f64;
        for i in 0..36 {
            for j in 0..36 {
                worst = worst.max((rebuilt[(i, j)] - h.matrix[(i, j)]).abs());
            }
        }
        assert!(worst < 1e-10, "{worst}");
        let (res, ortho) = eig.residuals(&h.matrix);
        assert!(res < EIGEN_TOLERANCE && ortho < EIGEN_TOLERANCE);
    }

    #[test]
    fn fermi_special_values() {
        let p = FermiParams::new(0.4, 0.3).unwrap();
        assert_eq!(fermi(0.4, p), 0.5);
        let cold = FermiParams::new(0.4, 0.0).unwrap();
        assert_eq!(fermi(0.4, cold), 1.0);
        assert_eq!(fermi(-3.0, cold), 1.0);
        assert_eq!(fermi(0.400001, cold), 0.0);
        let tiny = FermiParams::new(0.0, 1e-4).unwrap();
        assert_eq!(fermi(1.0, tiny), 0.0);
        assert_eq!(fermi(-1.0, tiny), 1.0);
        assert!(FermiParams::new(0.0, -1.0).is_err());
    }

    #[test]
    fn derivative_weight_values() {
        let p = FermiParams::new(0.2, 0.25).unwrap();
        assert!((fermi_derivative_weight(0.2, p).unwrap() - 1.0).abs() < 1e-15);
        let a = fermi_derivative_weight(0.2 + 0.37, p).unwrap();
        let b = fermi_derivative_weight(0.2 - 0.37, p).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(fermi_derivative_weight(0.0, FermiParams::new(0.0, 0.0).unwrap()).is_err());
        assert_eq!(fermi_derivative_weight(1e6, p).unwrap(), 0.0);
    }

    #[test]
    fn derivative_weight_integrates_to_one() {
        let p = FermiParams::new(-0.3, 0.07).unwrap();
        let (a, b) = (p.mu - 60.0 * p.temperature, p.mu + 60.0 * p.temperature);
        let total = crate::quadrature::integrate(
            |e| fermi_derivative_weight(e, p).unwrap(),
            a,
            b,
            p.temperature / 4.0,
            crate::quadrature::DEFAULT_NODES,
        );
        assert!((total - 1.0).abs() < 1e-10, "{total}");
    }

    #[test]
    fn functions_of_h() {
        let lat = LatticeSpec::new(1, 12, Boundary::Dirichlet).unwrap();
        let h = realize(&lat, &DisorderSpec::uniform(2.0, 1.0, 9), 0, 4000).unwrap();
        let eig = diagonalize(&h).unwrap();
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let hx = apply_function_of_h(&eig, |e| e, &x).unwrap();
        for i in 0..12 {
            let direct: f64 = (0..12).map(|j| h.matrix[(i, j)] * x[j]).sum();
            assert!((hx[i] - direct).abs() < 1e-10);
        }
        let same = apply_function_of_h(&eig, |_| 1.0, &x).unwrap();
        assert!(same.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-12));
        let below = FermiParams::new(eig.eigenvalues[0] - 1.0, 0.0).unwrap();
        let empty = apply_function_of_h(&eig, |e| fermi(e, below), &x).unwrap();
        assert!(empty.iter().all(|&v| v == 0.0));
        assert!(apply_function_of_h(&eig, |e| e, &x[..5]).is_err());
    }

    #[test]
    fn dos_has_unit_mass_and_band_support() {
        let eig = free(1, 40, Boundary::Dirichlet);
        let dos = dos_measure(&eig);
        assert!((dos.total_mass() - 1.0).abs() < 1e-14);
        assert!(dos.points.iter().all(|p| p.location.abs() <= 2.0));
    }

    #[test]
    fn dos_binning_is_additive() {
        let lat = LatticeSpec::new(1, 30, Boundary::Dirichlet).unwrap();
        let h = realize(&lat, &DisorderSpec::uniform(2.0, 1.0, 2), 0, 4000).unwrap();
        let dos = dos_measure(&diagonalize(&h).unwrap());
        let fine = dos.bin(&Bins::new(-4.0, 4.0, 40).unwrap());
        let coarse = dos.bin(&Bins::new(-4.0, 4.0, 20).unwrap());
        for (i, c) in coarse.iter().enumerate() {
            assert!((c - fine[2 * i] - fine[2 * i + 1]).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn fermi_monotone(e1 in -10.0f64..10.0, e2 in -10.0f64..10.0, mu in -3.0f64..3.0, t in 0.0f64..2.0) {
            let p = FermiParams { mu, temperature: t };
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            prop_assert!(fermi(lo, p) >= fermi(hi, p));
            prop_assert!((0.0..=1.0).contains(&fermi(e1, p)));
            let higher = FermiParams { mu: mu + 0.5, temperature: t };
            prop_assert!(fermi(e1, higher) >= fermi(e1, p));
            if t > 0.0 {
                prop_assert!(fermi_derivative_weight(e1, p).unwrap() >= 0.0);
            }
        }
    }
}
