//! Field profiles and the linear-response currents driven by them.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kubo::KuboData;
use crate::measure::SpectralMeasure;
use crate::model::SiteOperator;
use crate::quadrature::GaussLegendre;
use crate::spectral::{EigenSystem, FermiParams};

/// Relative threshold below which `|Ê|` is treated as zero when sizing grids.
pub const SUPPORT_THRESHOLD: f64 = 1e-12;
pub const DEFAULT_NU_NODES: usize = 8192;
const SYMMETRY_TOLERANCE: f64 = 1e-12;
const COVERAGE_TOLERANCE: f64 = 1e-6;

/// Fourier amplitude `Ê(ν)` of the electric field.
///
/// The analytic profiles are symmetrized pulses centred at `±ν₀`, so they
/// are real and even.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FieldProfile {
    Gaussian {
        center: f64,
        width: f64,
        amplitude: f64,
    },
    Lorentzian {
        center: f64,
        gamma: f64,
        amplitude: f64,
    },
    /// Linear interpolation on a sorted grid; zero outside it.
    Tabulated { nu: Vec<f64>, re: Vec<f64>, im: Vec<f64> },
}

impl Default for FieldProfile {
    fn default() -> Self {
        FieldProfile::Gaussian {
            center: 0.0,
            width: 1.0,
            amplitude: 1.0,
        }
    }
}

impl FieldProfile {
    pub fn validate(&self) -> Result<()> {
        match self {
            FieldProfile::Gaussian { center, width, amplitude } => {
                check_pulse(*center, *width, *amplitude, "width")
            }
            FieldProfile::Lorentzian { center, gamma, amplitude } => {
                check_pulse(*center, *gamma, *amplitude, "gamma")
            }
            FieldProfile::Tabulated { nu, re, im } => {
                if nu.len() < 2 || re.len() != nu.len() || im.len() != nu.len() {
                    return Err(Error::Input(
                        "tabulated field needs at least two nodes and equal-length columns".into(),
                    ));
                }
                if nu.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::Input("tabulated field grid must be strictly increasing".into()));
                }
                if nu.iter().chain(re).chain(im).any(|x| !x.is_finite()) {
                    return Err(Error::Input("tabulated field has non-finite entries".into()));
                }
                let scale = self.sup_abs().max(1.0);
                for &x in nu {
                    let defect = (self.eval(x) - self.eval(-x).conj()).norm();
                    if defect > SYMMETRY_TOLERANCE * scale {
                        return Err(Error::Input(format!(
                            "field violates Ê(ν) = conj(Ê(-ν)) at ν = {x} (defect {defect:e})"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, nu: f64) -> Complex64 {
        match self {
            FieldProfile::Gaussian { center, width, amplitude } => {
                let g = |x: f64| (-0.5 * (x / width).powi(2)).exp();
                (0.5 * amplitude * (g(nu - center) + g(nu + center))).into()
            }
            FieldProfile::Lorentzian { center, gamma, amplitude } => {
                let g = |x: f64| gamma * gamma / (x * x + gamma * gamma);
                (0.5 * amplitude * (g(nu - center) + g(nu + center))).into()
            }
            FieldProfile::Tabulated { nu: grid, re, im } => {
                let n = grid.len();
                if nu < grid[0] || nu > grid[n - 1] {
                    return Complex64::new(0.0, 0.0);
                }
                let k = grid.partition_point(|&g| g <= nu).clamp(1, n - 1);
                let s = (nu - grid[k - 1]) / (grid[k] - grid[k - 1]);
                Complex64::new(
                    re[k - 1] + s * (re[k] - re[k - 1]),
                    im[k - 1] + s * (im[k] - im[k - 1]),
                )
            }
        }
    }

    /// `sup_ν |Ê(ν)|`.
    pub fn sup_abs(&self) -> f64 {
        match self {
            FieldProfile::Gaussian { amplitude, .. } | FieldProfile::Lorentzian { amplitude, .. } => {
                // each half-pulse peaks at a/2 and the two can overlap
                amplitude.abs()
            }
            FieldProfile::Tabulated { re, im, .. } => re
                .iter()
                .zip(im)
                .map(|(a, b)| a.hypot(*b))
                .fold(0.0, f64::max),
        }
    }

    /// Symmetric interval outside which `|Ê| <= threshold · sup |Ê|`.
    pub fn support(&self, threshold: f64) -> (f64, f64) {
        let half = match self {
            FieldProfile::Gaussian { center, width, .. } => {
                center.abs() + width * (2.0 * (1.0 / threshold).ln()).sqrt()
            }
            FieldProfile::Lorentzian { center, gamma, .. } => {
                center.abs() + gamma * (1.0 / threshold - 1.0).max(0.0).sqrt()
            }
            FieldProfile::Tabulated { nu, re, im } => {
                let cut = threshold * self.sup_abs();
                nu.iter()
                    .zip(re.iter().zip(im))
                    .filter(|(_, (a, b))| a.hypot(**b) > cut)
                    .map(|(x, _)| x.abs())
                    .fold(0.0, f64::max)
            }
        };
        (-half, half)
    }

    /// Default adiabatic quadrature grid: uniform nodes over the support.
    pub fn default_nu_grid(&self) -> Vec<f64> {
        let (lo, hi) = self.support(SUPPORT_THRESHOLD);
        uniform_grid(lo, hi, DEFAULT_NU_NODES)
    }

    /// `∫|Ê|` outside `[a, b]`.
    fn mass_outside(&self, a: f64, b: f64) -> f64 {
        let (lo, hi) = self.support(1e-16);
        let (lo, hi) = (lo.min(a), hi.max(b));
        let gl = GaussLegendre::new(10);
        let abs = |x: f64| self.eval(x).norm();
        let step = (hi - lo) / 4096.0;
        let mut total = 0.0;
        if a > lo {
            total += gl.composite(&abs, lo, a, step);
        }
        if hi > b {
            total += gl.composite(&abs, b, hi, step);
        }
        if let FieldProfile::Lorentzian { center, gamma, amplitude } = self {
            // algebraic tails beyond the 1e-16 window
            let tail = |x: f64| 0.5 * amplitude.abs() * gamma * (PI / 2.0 - ((x - center.abs()) / gamma).atan());
            total += 2.0 * tail(hi.max(-lo));
        }
        total
    }

    fn l1_norm(&self) -> f64 {
        self.mass_outside(0.0, 0.0)
    }
}

fn check_pulse(center: f64, width: f64, amplitude: f64, name: &str) -> Result<()> {
    if !(center >= 0.0 && center.is_finite()) {
        return Err(Error::Input(format!("field center must be >= 0, got {center}")));
    }
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::Input(format!("field {name} must be positive, got {width}")));
    }
    if !amplitude.is_finite() {
        return Err(Error::Input("field amplitude must be finite".into()));
    }
    Ok(())
}

pub fn uniform_grid(lo: f64, hi: f64, nodes: usize) -> Vec<f64> {
    let n = nodes.max(2);
    let h = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|k| if k + 1 == n { hi } else { lo + k as f64 * h })
        .collect()
}

/// Current amplitudes on a time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurrentTrace {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Imaginary part of the raw sum at each time, discarded from `values`.
    pub imag_residual: Vec<f64>,
    pub meta: serde_json::Value,
}

impl CurrentTrace {
    fn from_complex(times: &[f64], raw: Vec<Complex64>, meta: serde_json::Value) -> Self {
        CurrentTrace {
            times: times.to_vec(),
            values: raw.iter().map(|z| z.re).collect(),
            imag_residual: raw.iter().map(|z| z.im).collect(),
            meta,
        }
    }

    pub fn max_imag_residual(&self) -> f64 {
        self.imag_residual.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `sup_t |J(t) - other(t)|` on a shared time grid.
    pub fn sup_gap(&self, other: &CurrentTrace) -> Result<f64> {
        if self.times != other.times {
            return Err(Error::Input("current traces live on different time grids".into()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(["t", "J", "imag_residual"])?;
        for ((t, j), r) in self.times.iter().zip(&self.values).zip(&self.imag_residual) {
            w.write_record([format!("{t:?}"), format!("{j:?}"), format!("{r:?}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `J(t) = ∫ Σ(dν) e^{iνt} Ê(ν)`.
pub fn in_phase_current(
    measure: &SpectralMeasure,
    field: &FieldProfile,
    times: &[f64],
) -> Result<CurrentTrace> {
    field.validate()?;
    let e0 = field.eval(0.0);
    let amps: Vec<(f64, Complex64)> = measure
        .points
        .iter()
        .map(|p| (p.location, p.weight * field.eval(p.location)))
        .collect();
    let raw = times
        .iter()
        .map(|&t| {
            let mut acc = measure.atom_at_zero * e0;
            for &(nu, a) in &amps {
                acc += a * Complex64::from_polar(1.0, nu * t);
            }
            acc
        })
        .collect();
    Ok(CurrentTrace::from_complex(
        times,
        raw,
        serde_json::json!({ "kind": "in_phase", "field": field }),
    ))
}

/// Which part of `σ(η, ·)` enters the adiabatic current.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdiabaticPart {
    /// `Re σ` only: the in-phase current.
    InPhase,
    /// The full complex `σ`.
    Full,
}

/// `J_η(t) = e^{ηt} ∫ dν e^{iνt} σ(η, ν) Ê(ν)` by the trapezoidal rule on
/// `nu_grid` (the field's default grid when `None`).
///
/// Each pole of `σ` at `ν = -ν_k` is integrated with its singular part
/// removed: `∫ K(ν) g(ν) = ∫ K (g - g(c)) + g(c) ∫ K`, the last integral in
/// closed form. This keeps the rule accurate for `η` far below the grid
/// spacing.
pub fn adiabatic_current(
    measure: &SpectralMeasure,
    field: &FieldProfile,
    eta: f64,
    times: &[f64],
    nu_grid: Option<&[f64]>,
    part: AdiabaticPart,
) -> Result<CurrentTrace> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Domain(format!("eta must be positive, got {eta}")));
    }
    field.validate()?;
    let default;
    let grid = match nu_grid {
        Some(g) => g,
        None => {
            default = field.default_nu_grid();
            &default
        }
    };
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Input("nu grid must be strictly increasing with two or more nodes".into()));
    }
    let (a, b) = (grid[0], grid[grid.len() - 1]);
    let outside = field.mass_outside(a, b);
    let norm = field.l1_norm();
    if outside > COVERAGE_TOLERANCE * norm.max(f64::MIN_POSITIVE) {
        return Err(Error::Input(format!(
            "nu grid [{a}, {b}] leaves {outside:e} of the field's L1 mass {norm:e} uncovered"
        )));
    }

    let tw = trapezoid_weights(grid);
    let poles: Vec<(f64, f64)> = std::iter::once((0.0, measure.atom_at_zero))
        .chain(measure.points.iter().map(|p| (p.location, p.weight)))
        .filter(|&(_, w)| w != 0.0)
        .map(|(loc, w)| (-loc, w))
        .collect();

    // σ on the grid and, per pole, the exact-minus-discrete kernel mass
    let mut sigma = vec![Complex64::new(0.0, 0.0); grid.len()];
    let mut corrections = Vec::with_capacity(poles.len());
    for &(c, w) in &poles {
        let mut discrete = Complex64::new(0.0, 0.0);
        for (j, &nu) in grid.iter().enumerate() {
            let k = kernel(nu - c, eta, part);
            sigma[j] += w * k;
            discrete += tw[j] * k;
        }
        let exact = kernel_integral(a - c, b - c, eta, part);
        corrections.push((c, w * (exact - discrete)));
    }

    let field_on_grid: Vec<Complex64> = grid.iter().map(|&nu| field.eval(nu)).collect();
    let field_at_poles: Vec<Complex64> = corrections.iter().map(|&(c, _)| field.eval(c)).collect();
    let raw = times
        .iter()
        .map(|&t| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, &nu) in grid.iter().enumerate() {
                acc += tw[j] * sigma[j] * field_on_grid[j] * Complex64::from_polar(1.0, nu * t);
            }
            for ((c, corr), e) in corrections.iter().zip(&field_at_poles) {
                acc += corr * e * Complex64::from_polar(1.0, c * t);
            }
            (eta * t).exp() * acc
        })
        .collect();
    Ok(CurrentTrace::from_complex(
        times,
        raw,
        serde_json::json!({
            "kind": "adiabatic",
            "part": part,
            "eta": eta,
            "field": field,
            "nu_nodes": grid.len(),
        }),
    ))
}

/// The pole kernel of `σ` at offset `x = ν - c`, per unit weight.
fn kernel(x: f64, eta: f64, part: AdiabaticPart) -> Complex64 {
    let d = x * x + eta * eta;
    let re = eta / (PI * d);
    match part {
        AdiabaticPart::InPhase => re.into(),
        AdiabaticPart::Full => Complex64::new(re, x / (PI * d)),
    }
}

/// `∫_{lo}^{hi} kernel(x) dx`.
fn kernel_integral(lo: f64, hi: f64, eta: f64, part: AdiabaticPart) -> Complex64 {
    let re = ((hi / eta).atan() - (lo / eta).atan()) / PI;
    match part {
        AdiabaticPart::InPhase => re.into(),
        AdiabaticPart::Full => {
            let im = ((hi * hi + eta * eta) / (lo * lo + eta * eta)).ln() / (2.0 * PI);
            Complex64::new(re, im)
        }
    }
}

fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    for k in 0..n - 1 {
        let h = 0.5 * (grid[k + 1] - grid[k]);
        w[k] += h;
        w[k + 1] += h;
    }
    w
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TLimitRow {
    pub temperature: f64,
    pub sup_gap: f64,
}

/// `sup_t |J^{in,T}(t) - J^{in,0}(t)|` for each temperature in `temperatures`.
pub fn t_limit_current_check(
    eig: &EigenSystem,
    velocity: &SiteOperator,
    field: &FieldProfile,
    mu: f64,
    temperatures: &[f64],
    times: &[f64],
    kde_scale: f64,
) -> Result<Vec<TLimitRow>> {
    if temperatures.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::Domain("temperatures must be positive".into()));
    }
    let data = KuboData::new(eig, velocity, kde_scale)?;
    let cold = in_phase_current(&data.sigma(FermiParams::new(mu, 0.0)?)?, field, times)?;
    temperatures
        .iter()
        .map(|&t| {
            let warm = in_phase_current(&data.sigma(FermiParams::new(mu, t)?)?, field, times)?;
            Ok(TLimitRow {
                temperature: t,
                sup_gap: warm.sup_gap(&cold)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::PointMass;
    use proptest::prelude::*;

    fn gaussian(center: f64, width: f64) -> FieldProfile {
        FieldProfile::Gaussian {
            center,
            width,
            amplitude: 1.0,
        }
    }

    fn times() -> Vec<f64> {
        (0..41).map(|k| -10.0 + 0.5 * k as f64).collect()
    }

    #[test]
    fn atom_gives_constant_current() {
        let f = gaussian(0.5, 0.3);
        let j = in_phase_current(&SpectralMeasure::atom(0.7), &f, &times()).unwrap();
        let want = 0.7 * f.eval(0.0).re;
        assert!(j.values.iter().all(|v| (v - want).abs() < 1e-15));
    }

    #[test]
    fn conjugate_pair_gives_cosine() {
        let f = gaussian(0.0, 1.0);
        let (w, nu0) = (0.3, 1.3);
        let m = SpectralMeasure::from_points(0.0, vec![PointMass::new(nu0, w), PointMass::new(-nu0, w)]);
        let j = in_phase_current(&m, &f, &times()).unwrap();
        for (t, v) in j.times.iter().zip(&j.values) {
            let want = 2.0 * w * f.eval(nu0).re * (nu0 * t).cos();
            assert!((v - want).abs() < 1e-14);
        }
        assert!(j.max_imag_residual() < 1e-14);
    }

    #[test]
    fn tabulated_field_symmetry_is_checked() {
        let good = FieldProfile::Tabulated {
            nu: vec![-1.0, 0.0, 1.0],
            re: vec![0.5, 1.0, 0.5],
            im: vec![-0.2, 0.0, 0.2],
        };
        assert!(good.validate().is_ok());
        assert!((good.eval(0.5) - Complex64::new(0.75, 0.1)).norm() < 1e-15);
        assert_eq!(good.eval(2.0), Complex64::new(0.0, 0.0));
        let bad = FieldProfile::Tabulated {
            nu: vec![-1.0, 0.0, 1.0],
            re: vec![0.5, 1.0, 0.4],
            im: vec![0.0; 3],
        };
        let m = SpectralMeasure::atom(1.0);
        assert!(matches!(in_phase_current(&m, &bad, &[0.0]), Err(Error::Input(_))));
    }

    #[test]
    fn zero_measure_gives_zero_currents() {
        let f = gaussian(0.2, 0.5);
        let z = SpectralMeasure::zero();
        assert!(in_phase_current(&z, &f, &times()).unwrap().sup_abs() == 0.0);
        let a = adiabatic_current(&z, &f, 0.1, &times(), None, AdiabaticPart::Full).unwrap();
        assert!(a.sup_abs() == 0.0);
    }

    #[test]
    fn adiabatic_approaches_in_phase() {
        let f = gaussian(0.4, 0.6);
        let m = SpectralMeasure::from_points(
            0.2,
            vec![
                PointMass::new(0.7, 0.3),
                PointMass::new(-0.7, 0.3),
                PointMass::new(1.9, 0.1),
                PointMass::new(-1.9, 0.1),
            ],
        );
        let t = [0.0];
        let exact = in_phase_current(&m, &f, &t).unwrap().values[0];
        let eta_small = adiabatic_current(&m, &f, 1e-3, &t, None, AdiabaticPart::InPhase).unwrap();
        assert!(((eta_small.values[0] - exact) / exact).abs() <= 0.01);
        let gaps: Vec<f64> = [1.0, 0.3, 0.1, 0.03]
            .iter()
            .map(|&eta| {
                let j = adiabatic_current(&m, &f, eta, &t, None, AdiabaticPart::InPhase).unwrap();
                (j.values[0] - exact).abs()
            })
            .collect();
        assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
    }

    #[test]
    fn adiabatic_poisson_oracle() {
        // atom at 0 against a real even field: J_η(0) = ∫ P_η(ν) Ê(ν) dν,
        // which for a centred Gaussian is a Voigt-type integral; compare with
        // brute-force Gauss–Legendre on a very fine grid.
        let f = gaussian(0.0, 0.5);
        let eta = 0.2;
        let brute = crate::quadrature::integrate(
            |nu| eta / (PI * (nu * nu + eta * eta)) * f.eval(nu).re,
            -8.0,
            8.0,
            0.01,
            10,
        );
        let j = adiabatic_current(&SpectralMeasure::atom(1.0), &f, eta, &[0.0], None, AdiabaticPart::InPhase)
            .unwrap();
        assert!((j.values[0] - brute).abs() < 1e-8, "{} vs {brute}", j.values[0]);
    }

    #[test]
    fn grid_must_cover_field() {
        let f = gaussian(0.0, 1.0);
        let grid = uniform_grid(-1.0, 1.0, 100);
        let m = SpectralMeasure::atom(1.0);
        let r = adiabatic_current(&m, &f, 0.1, &[0.0], Some(&grid), AdiabaticPart::InPhase);
        assert!(matches!(r, Err(Error::Input(_))));
        assert!(adiabatic_current(&m, &f, 0.0, &[0.0], None, AdiabaticPart::InPhase).is_err());
    }

    #[test]
    fn csv_layout() {
        let j = in_phase_current(&SpectralMeasure::atom(2.0), &gaussian(0.0, 1.0), &[0.0, 1.0]).unwrap();
        let mut buf = Vec::new();
        j.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,J,imag_residual\n0.0,2.0,0.0\n1.0,2.0,0.0\n");
    }

    proptest! {
        #[test]
        fn linear_and_bounded(
            locs in proptest::collection::vec(0.01f64..3.0, 1..6),
            ws in proptest::collection::vec(0.0f64..1.0, 6),
            atom in 0.0f64..1.0,
            t in -20.0f64..20.0,
        ) {
            let pts: Vec<PointMass> = locs
                .iter()
                .zip(&ws)
                .flat_map(|(&x, &w)| [PointMass::new(x, w), PointMass::new(-x, w)])
                .collect();
            let m1 = SpectralMeasure::from_points(atom, pts);
            let m2 = SpectralMeasure::from_points(0.3, vec![PointMass::new(0.5, 0.2), PointMass::new(-0.5, 0.2)]);
            let f = gaussian(0.8, 0.4);
            let ts = [t];
            let j1 = in_phase_current(&m1, &f, &ts).unwrap();
            let j2 = in_phase_current(&m2, &f, &ts).unwrap();
            let j12 = in_phase_current(&m1.add(&m2), &f, &ts).unwrap();
            prop_assert!((j12.values[0] - j1.values[0] - j2.values[0]).abs() < 1e-12);
            prop_assert!(j1.max_imag_residual() <= 1e-10);
            prop_assert!(j1.sup_abs() <= m1.total_mass() * f.sup_abs() + 1e-12);
        }
    }
}
