//! Conductivity measures of one realization.
//!
//! Every measure here is a finite sum over eigen-pairs `(n, m)`:
//!
//! * `Φ` puts `|<v_n, V v_m>|² / N` at `(E_n, E_m)` (`V` the velocity);
//! * `Γ_μ^T` puts `π Φ_nm F_μ^T(E_n, E_m)` at the frequency `E_n - E_m`;
//! * `Ψ` collects `π Φ_nm` over degenerate pairs at the energy `E_n`;
//! * `Σ_μ^T = Ψ((-f)') δ_0 + Γ_μ^T`.
//!
//! Pairs with `|E_n - E_m| <= ε_degen` belong to the kernel of the
//! Liouvillian and feed `Ψ`; all others feed `Γ`.

use std::f64::consts::{LN_2, PI};

use faer::Mat;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{Bins, PairEntry, PairMeasure, PointMass, SpectralMeasure};
use crate::model::{OperatorKind, SiteOperator};
use crate::quadrature::GaussLegendre;
use crate::spectral::{derivative_weight, fermi, EigenSystem, FermiParams};

/// Default prefactor `c` of the zero-temperature atom bandwidth
/// `h = c · width · N^{-1/3}`.
pub const DEFAULT_KDE_SCALE: f64 = 1.0;

/// The symmetric difference quotient `F_μ^T` of the Fermi function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelF {
    pub params: FermiParams,
    /// Pairs closer than this are treated as equal (`F = 0`).
    pub degeneracy_tolerance: f64,
}

impl KernelF {
    pub fn new(params: FermiParams, degeneracy_tolerance: f64) -> Self {
        KernelF {
            params,
            degeneracy_tolerance,
        }
    }

    pub fn eval(&self, l1: f64, l2: f64) -> f64 {
        let (l1, l2) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let delta = (l1 - l2).abs();
        if delta <= self.degeneracy_tolerance || delta == 0.0 {
            return 0.0;
        }
        let p = self.params;
        if p.temperature == 0.0 {
            return if fermi(l1, p) != fermi(l2, p) {
                1.0 / delta
            } else {
                0.0
            };
        }
        // f(a) - f(b) = sinh((b-a)/2T) / (2 cosh((a-μ)/2T) cosh((b-μ)/2T)),
        // evaluated in log space so neither factor overflows.
        let two_t = 2.0 * p.temperature;
        let u = delta / two_t;
        let ln_sinh = u + (-(-2.0 * u).exp_m1()).ln() - LN_2;
        let ln_cosh = |v: f64| {
            let v = v.abs();
            v + (-2.0 * v).exp().ln_1p() - LN_2
        };
        let ln_f = ln_sinh
            - LN_2
            - delta.ln()
            - ln_cosh((l1 - p.mu) / two_t)
            - ln_cosh((l2 - p.mu) / two_t);
        ln_f.exp()
    }
}

/// `F_μ^T(λ1, λ2)`, zero only on the exact diagonal.
pub fn kernel_f(l1: f64, l2: f64, p: FermiParams) -> f64 {
    KernelF::new(p, 0.0).eval(l1, l2)
}

/// `|<v_n, V v_m>|² / N` for all ordered pairs, symmetrized in `(n, m)`.
pub fn velocity_weights(eig: &EigenSystem, velocity: &SiteOperator) -> Result<Mat<f64>> {
    let n = eig.len();
    if velocity.dim() != n {
        return Err(Error::Input(format!(
            "operator has dimension {} but the eigensystem has {n}",
            velocity.dim()
        )));
    }
    let v = &eig.eigenvectors;
    let re = v.transpose() * (&velocity.re * v);
    let im = v.transpose() * (&velocity.im * v);
    let scale = 1.0 / n as f64;
    Ok(Mat::from_fn(n, n, |a, b| {
        let ab = re[(a, b)].powi(2) + im[(a, b)].powi(2);
        let ba = re[(b, a)].powi(2) + im[(b, a)].powi(2);
        0.5 * (ab + ba) * scale
    }))
}

/// Velocity-velocity correlation measure of one realization.
pub fn phi_measure(eig: &EigenSystem, velocity: &SiteOperator) -> Result<PairMeasure> {
    let w = velocity_weights(eig, velocity)?;
    let n = eig.len();
    let mut entries = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            entries.push(PairEntry {
                lambda1: eig.eigenvalues[a],
                lambda2: eig.eigenvalues[b],
                weight: w[(a, b)],
            });
        }
    }
    Ok(PairMeasure {
        entries,
        volume: n,
        degeneracy_tolerance: eig.degeneracy_tolerance(),
        meta: eig.meta,
    })
}

/// `Γ_μ^T`: mass `π Φ F_μ^T` at `λ1 - λ2`; never charges zero frequency.
pub fn gamma_measure(phi: &PairMeasure, p: FermiParams) -> SpectralMeasure {
    let kernel = KernelF::new(p, phi.degeneracy_tolerance);
    let points = phi
        .entries
        .iter()
        .filter(|e| e.weight > 0.0)
        .filter_map(|e| {
            let f = kernel.eval(e.lambda1, e.lambda2);
            (f > 0.0).then(|| PointMass::new(e.lambda1 - e.lambda2, PI * e.weight * f))
        })
        .collect();
    SpectralMeasure::from_points(0.0, points)
}

fn psi_from_phi(phi: &PairMeasure) -> SpectralMeasure {
    let tol = phi.degeneracy_tolerance;
    let n = phi.volume;
    let mut points = Vec::with_capacity(n);
    // entries are stored row by row: row a holds (E_a, E_b) for all b
    for row in phi.entries.chunks(n) {
        let energy = row[0].lambda1;
        let w: f64 = row
            .iter()
            .filter(|e| (e.lambda1 - e.lambda2).abs() <= tol)
            .map(|e| e.weight)
            .sum();
        if w > 0.0 {
            points.push(PointMass::new(energy, PI * w));
        }
    }
    SpectralMeasure::from_points(0.0, points)
}

/// `Ψ`: mass `π Σ_{m ~ n} |<v_n, V v_m>|² / N` at `E_n`, where `m ~ n` runs
/// over the eigenvalues within `ε_degen` of `E_n` (including `n` itself).
pub fn psi_diagonal_measure(eig: &EigenSystem, velocity: &SiteOperator) -> Result<SpectralMeasure> {
    let w = velocity_weights(eig, velocity)?;
    let tol = eig.degeneracy_tolerance();
    let e = &eig.eigenvalues;
    let n = eig.len();
    let mut points = Vec::with_capacity(n);
    for a in 0..n {
        let mut total = 0.0;
        // eigenvalues are sorted, so the cluster of `a` is contiguous
        let mut lo = a;
        while lo > 0 && e[a] - e[lo - 1] <= tol {
            lo -= 1;
        }
        let mut hi = a;
        while hi + 1 < n && e[hi + 1] - e[a] <= tol {
            hi += 1;
        }
        for b in lo..=hi {
            total += w[(a, b)];
        }
        if total > 0.0 {
            points.push(PointMass::new(e[a], PI * total));
        }
    }
    Ok(SpectralMeasure::from_points(0.0, points))
}

/// `h = c · width · N^{-1/3}`.
pub fn default_bandwidth(eig: &EigenSystem, scale: f64) -> f64 {
    scale * eig.spectral_width() * (eig.len() as f64).powf(-1.0 / 3.0)
}

/// Gaussian kernel-density estimate of the density of `measure` at `x`.
/// The estimate vanishes outside the convex hull of the support.
pub fn kde_density(measure: &SpectralMeasure, x: f64, bandwidth: f64) -> f64 {
    let Some((lo, hi)) = measure.support_hull() else {
        return 0.0;
    };
    if x < lo || x > hi {
        return 0.0;
    }
    let norm = 1.0 / (bandwidth * (2.0 * PI).sqrt());
    measure
        .points
        .iter()
        .map(|p| {
            let z = (p.location - x) / bandwidth;
            p.weight * norm * (-0.5 * z * z).exp()
        })
        .sum()
}

/// Weight of the atom of `Σ_μ^T` at zero frequency.
///
/// For `T > 0` this is `Ψ((-f)')`; at `T = 0` it is a kernel-density
/// estimate of the density of `Ψ` at `μ`, which needs a bandwidth.
pub fn atom_weight(psi: &SpectralMeasure, p: FermiParams, bandwidth: Option<f64>) -> Result<f64> {
    if p.temperature > 0.0 {
        return Ok(psi.integrate(|e| derivative_weight(e, p.mu, p.temperature)));
    }
    match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => Ok(kde_density(psi, p.mu, h)),
        Some(h) => Err(Error::Domain(format!("bandwidth must be positive, got {h}"))),
        None => Err(Error::Domain(
            "the zero-temperature atom needs a smoothing bandwidth".into(),
        )),
    }
}

/// Per-realization data from which `Σ_μ^T` is evaluated at any `(μ, T)`.
#[derive(Clone, Debug)]
pub struct KuboData {
    pub phi: PairMeasure,
    pub psi: SpectralMeasure,
    /// Bandwidth used for the zero-temperature atom.
    pub bandwidth: f64,
}

impl KuboData {
    pub fn new(eig: &EigenSystem, velocity: &SiteOperator, kde_scale: f64) -> Result<Self> {
        let phi = phi_measure(eig, velocity)?;
        let psi = psi_from_phi(&phi);
        Ok(KuboData {
            phi,
            psi,
            bandwidth: default_bandwidth(eig, kde_scale),
        })
    }

    pub fn gamma(&self, p: FermiParams) -> SpectralMeasure {
        gamma_measure(&self.phi, p)
    }

    pub fn atom(&self, p: FermiParams) -> Result<f64> {
        atom_weight(&self.psi, p, Some(self.bandwidth))
    }

    pub fn sigma(&self, p: FermiParams) -> Result<SpectralMeasure> {
        let mut sigma = self.gamma(p);
        sigma.atom_at_zero = self.atom(p)?;
        Ok(sigma)
    }
}

/// `Σ_μ^T` of one realization with the default atom bandwidth.
pub fn sigma_measure(
    eig: &EigenSystem,
    velocity: &SiteOperator,
    p: FermiParams,
) -> Result<SpectralMeasure> {
    KuboData::new(eig, velocity, DEFAULT_KDE_SCALE)?.sigma(p)
}

/// Off-zero mass of `Σ` computed along two independent routes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassPaths {
    /// Eigen-pair sum `(π/N) Σ (E_n - E_m)(f_m - f_n) |<v_n, X v_m>|²`.
    pub mass_a: f64,
    /// Site-basis trace `(π/N) tr(V^† i[X, f(H)])` minus the kernel part.
    pub mass_b: f64,
}

pub fn mass_two_path_check(
    eig: &EigenSystem,
    velocity: &SiteOperator,
    x1: &SiteOperator,
    p: FermiParams,
) -> Result<MassPaths> {
    let n = eig.len();
    if x1.kind != OperatorKind::Position || velocity.dim() != n || x1.dim() != n {
        return Err(Error::Input(
            "mass check needs a velocity and a position operator of matching dimension".into(),
        ));
    }
    let tol = eig.degeneracy_tolerance();
    let e = &eig.eigenvalues;
    let f: Vec<f64> = e.iter().map(|&x| fermi(x, p)).collect();
    let v = &eig.eigenvectors;
    let pos = x1.real_diagonal();
    let scaled = Mat::from_fn(n, n, |i, k| pos[i] * v[(i, k)]);
    let x_eig = v.transpose() * &scaled;

    let mut off = 0.0;
    let mut kernel = 0.0;
    for a in 0..n {
        for b in 0..n {
            let term = (e[a] - e[b]) * (f[b] - f[a]) * x_eig[(a, b)].powi(2);
            if (e[a] - e[b]).abs() > tol {
                off += term;
            } else {
                kernel += term;
            }
        }
    }
    let mass_a = PI * off / n as f64;

    let fh = crate::spectral::function_of_h_matrix(eig, |x| fermi(x, p));
    // conj(V_xy) · i (X_x - X_y) f(H)_xy with V = re + i·im
    let mut trace = 0.0;
    for y in 0..n {
        for x in 0..n {
            let c = (pos[x] - pos[y]) * fh[(x, y)];
            trace += velocity.im[(x, y)] * c;
        }
    }
    let mass_b = PI * (trace - kernel) / n as f64;
    Ok(MassPaths { mass_a, mass_b })
}

/// Quadrature settings for the temperature-convolution identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    /// Gauss–Legendre points per sub-panel.
    pub nodes: usize,
    /// Largest sub-panel width, in units of `T`.
    pub max_panel: f64,
    /// Half-width of the integration window, in units of `T`.
    pub window: f64,
    /// Target accuracy; used to flag under-resolution.
    pub tolerance: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            nodes: crate::quadrature::DEFAULT_NODES,
            max_panel: 0.5,
            window: 60.0,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionReport {
    /// `sup_B |Σ_μ^T(B) - ∫ dE (-f)'(E) Σ_E^0(B)|` over the off-zero bins.
    pub max_discrepancy: f64,
    /// Change of the right-hand side when every sub-panel is halved.
    pub refinement_change: f64,
    pub under_resolved: bool,
    pub panels: usize,
}

/// Compares `Γ_μ^T` with the `(-f)'`-average of `Γ_E^0` bin by bin.
///
/// `Γ_E^0(B)` is piecewise constant in `E` with jumps at eigenvalues, so the
/// `E` integral is split into panels between consecutive eigenvalues.
pub fn convolution_check(
    eig: &EigenSystem,
    velocity: &SiteOperator,
    p: FermiParams,
    quad: QuadratureSpec,
    bins: &Bins,
) -> Result<ConvolutionReport> {
    if !(p.temperature > 0.0) {
        return Err(Error::Domain("the convolution identity needs T > 0".into()));
    }
    let phi = phi_measure(eig, velocity)?;
    let lhs = gamma_measure(&phi, p).bin(bins);

    let t = p.temperature;
    let (lo, hi) = (p.mu - quad.window * t, p.mu + quad.window * t);
    let mut breaks = vec![lo];
    breaks.extend(eig.eigenvalues.iter().copied().filter(|&e| e > lo && e < hi));
    breaks.push(hi);

    let gl = GaussLegendre::new(quad.nodes);
    let weight = |x: f64| derivative_weight(x, p.mu, t);
    let tol = phi.degeneracy_tolerance;
    let mut rhs = vec![0.0; bins.count];
    let mut rhs_fine = vec![0.0; bins.count];
    let mut panels = 0;
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        panels += 1;
        let coarse = gl.composite(&weight, a, b, quad.max_panel * t);
        let fine = gl.composite(&weight, a, b, 0.5 * quad.max_panel * t);
        let mid = 0.5 * (a + b);
        for e in &phi.entries {
            if e.weight == 0.0 || (e.lambda1 - e.lambda2).abs() <= tol {
                continue;
            }
            // Γ_mid^0: pairs straddling the Fermi level `mid`
            if (e.lambda1 <= mid) == (e.lambda2 <= mid) {
                continue;
            }
            if let Some(i) = bins.index_of(e.lambda1 - e.lambda2) {
                let mass = PI * e.weight / (e.lambda1 - e.lambda2).abs();
                rhs[i] += coarse * mass;
                rhs_fine[i] += fine * mass;
            }
        }
    }
    let max_discrepancy = lhs
        .iter()
        .zip(&rhs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let refinement_change = rhs
        .iter()
        .zip(&rhs_fine)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(ConvolutionReport {
        max_discrepancy,
        refinement_change,
        under_resolved: refinement_change > 0.1 * quad.tolerance,
        panels,
    })
}

/// `max_t |f_μ^T(t) - ∫ ds (-f_μ^T)'(s) f_s^0(t)|` on the given grid.
pub fn fermi_reconstruction_error(p: FermiParams, ts: &[f64], quad: QuadratureSpec) -> Result<f64> {
    if !(p.temperature > 0.0) {
        return Err(Error::Domain("reconstruction needs T > 0".into()));
    }
    let t = p.temperature;
    let gl = GaussLegendre::new(quad.nodes);
    let (lo, hi) = (p.mu - quad.window * t, p.mu + quad.window * t);
    let weight = |x: f64| derivative_weight(x, p.mu, t);
    Ok(ts
        .iter()
        .map(|&x| {
            // f_s^0(x) = 1 exactly when s >= x
            let from = x.max(lo);
            let integral = if from < hi {
                gl.composite(&weight, from, hi, quad.max_panel * t)
            } else {
                0.0
            };
            (fermi(x, p) - integral).abs()
        })
        .fold(0.0, f64::max))
}

/// `σ(η, ν) = (i/π) ∫ Σ(dλ) / (λ + ν + iη)`.
///
/// With this sign `Re σ` is the Poisson smoothing of `Σ` reflected through
/// zero, so `Re σ ≥ 0`.
pub fn stieltjes_transform(measure: &SpectralMeasure, eta: f64, nu: f64) -> Result<Complex64> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Domain(format!("eta must be positive, got {eta}")));
    }
    let pole = |lambda: f64| Complex64::new(lambda + nu, eta).inv();
    let mut acc = measure.atom_at_zero * pole(0.0);
    for p in &measure.points {
        acc += p.weight * pole(p.location);
    }
    Ok(Complex64::new(0.0, 1.0 / PI) * acc)
}
