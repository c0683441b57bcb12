//! Localization probes, the free-Laplacian oracle and the Mott probe.
//!
//! None of these decide whether an energy is localized; they report
//! finite-volume evidence (decay rates, growth tables, ratios).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::ensemble::{self, RunConfig, RunOptions, Task};
use crate::error::{Error, Result};
use crate::kubo::{default_bandwidth, kde_density, KuboData, DEFAULT_KDE_SCALE};
use crate::measure::{PointMass, SpectralMeasure};
use crate::model::{assemble_hamiltonian, hopping_velocity, Boundary, LatticeSpec};
use crate::spectral::{apply_function_of_h, derivative_weight, diagonalize, fermi, EigenSystem, FermiParams};

/// Largest distance from the center reachable in both directions along x₁.
pub fn decay_radius(lattice: &LatticeSpec) -> usize {
    (lattice.side - 1) / 2
}

pub fn mu_grid(interval: [f64; 2], count: usize) -> Vec<f64> {
    if count <= 1 || interval[0] == interval[1] {
        return vec![0.5 * (interval[0] + interval[1])];
    }
    crate::response::uniform_grid(interval[0], interval[1], count)
}

/// `sup_μ |<δ_x, f_μ^0(H) δ₀>|²` along the x₁ axis, averaged over `x = ±r`,
/// for `r = 0..=radius`.
pub fn decay_values(lattice: &LatticeSpec, eig: &EigenSystem, mus: &[f64]) -> Vec<f64> {
    let radius = decay_radius(lattice) as i64;
    let center = lattice.center();
    // number of eigenvalues <= μ, i.e. the prefix of the sorted spectrum
    let cuts: Vec<usize> = mus
        .iter()
        .map(|&mu| eig.eigenvalues.partition_point(|&e| e <= mu))
        .collect();
    let sup_at = |offset: i64| -> f64 {
        let Some(x) = lattice.axis_site(offset) else {
            return 0.0;
        };
        let mut best = 0.0f64;
        let mut acc = 0.0;
        let mut k = 0;
        let mut order: Vec<usize> = (0..cuts.len()).collect();
        order.sort_by_key(|&i| cuts[i]);
        for i in order {
            while k < cuts[i] {
                acc += eig.component(x, k) * eig.component(center, k);
                k += 1;
            }
            best = best.max(acc * acc);
        }
        best
    };
    (0..=radius)
        .map(|r| {
            if r == 0 {
                sup_at(0)
            } else {
                0.5 * (sup_at(r) + sup_at(-r))
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// Fitted rate `m` of `C e^{-m r}`.
    pub rate: f64,
    pub prefactor: f64,
    /// Coefficient of determination of the log-scale fit.
    pub r_squared: f64,
    pub r_min: usize,
    pub r_max: usize,
    pub points_used: usize,
    /// Why the fit was not made, if it was not.
    pub rejected: Option<String>,
}

impl DecayFit {
    /// `m > 0` with `R² >= 0.9`: the reporting convention for exponential decay.
    pub fn shows_decay(&self) -> bool {
        self.rejected.is_none() && self.rate > 0.0 && self.r_squared >= 0.9
    }
}

/// Least-squares fit of `ln v(r)` over `3 <= r <= 0.8 · radius`.
pub fn fit_decay(values: &[f64], radius: usize) -> DecayFit {
    let r_min = 3;
    let r_max = ((0.8 * radius as f64).floor() as usize).min(values.len().saturating_sub(1));
    let mut fit = DecayFit {
        rate: 0.0,
        prefactor: 0.0,
        r_squared: 0.0,
        r_min,
        r_max,
        points_used: 0,
        rejected: None,
    };
    let pts: Vec<(f64, f64)> = (r_min..=r_max)
        .filter(|&r| r < values.len())
        .map(|r| (r as f64, values[r]))
        .collect();
    if pts.iter().any(|&(_, v)| !(v > 0.0)) || pts.len() < 3 {
        fit.rejected = Some(format!("only {} usable positive values in the fit range", pts.len()));
        return fit;
    }
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), &(x, v)| (a + x, b + v.ln()));
    let (mx, my) = (sx / n, sy / n);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, v) in &pts {
        let (dx, dy) = (x - mx, v.ln() - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = pts
        .iter()
        .map(|&(x, v)| (v.ln() - intercept - slope * x).powi(2))
        .sum();
    fit.rate = -slope;
    fit.prefactor = intercept.exp();
    fit.r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 0.0 };
    fit.points_used = pts.len();
    fit
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayProfile {
    pub distances: Vec<usize>,
    pub values: Vec<f64>,
    pub stderr: Vec<Option<f64>>,
    pub fit: DecayFit,
    pub config_hash: String,
}

/// Ensemble mean of the Fermi-kernel decay with its exponential fit.
pub fn fermi_kernel_decay(
    cfg: &RunConfig,
    mu_interval: [f64; 2],
    mu_grid_count: usize,
    threads: Option<usize>,
) -> Result<DecayProfile> {
    if cfg.lattice.boundary != Boundary::Dirichlet {
        return Err(Error::config("lattice.boundary", "the decay diagnostic needs a dirichlet box"));
    }
    let mut cfg = cfg.clone();
    cfg.task = Task::DiagDecay;
    cfg.sweep = None;
    cfg.diag.mu_interval = mu_interval;
    cfg.diag.mu_grid_count = mu_grid_count;
    let est = ensemble::run(&cfg, &RunOptions { threads, ..Default::default() })?;
    let s = est
        .series("decay")
        .ok_or_else(|| Error::Input("decay series missing from the estimate".into()))?;
    Ok(DecayProfile {
        distances: (0..s.mean.len()).collect(),
        values: s.mean.clone(),
        stderr: s.stderr.clone(),
        fit: fit_decay(&s.mean, decay_radius(&cfg.lattice)),
        config_hash: est.meta.config_hash,
    })
}

/// `‖X₁ f_μ^T(H) δ₀‖²` with `X₁` centred on `δ₀`.
pub fn y_norm(lattice: &LatticeSpec, eig: &EigenSystem, p: FermiParams) -> Result<f64> {
    let n = lattice.sites();
    let mut delta = vec![0.0; n];
    delta[lattice.center()] = 1.0;
    let fv = apply_function_of_h(eig, |e| fermi(e, p), &delta)?;
    Ok(fv
        .iter()
        .enumerate()
        .map(|(x, v)| {
            let x1 = lattice.centered_x1(x) as f64;
            x1 * x1 * v * v
        })
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YNormRow {
    #[serde(rename = "L")]
    pub side: usize,
    pub mean: f64,
    pub stderr: Option<f64>,
}

/// `E ‖X₁ f_μ^T(H) δ₀‖²` for each box size.
pub fn y_norm_growth(
    cfg: &RunConfig,
    p: FermiParams,
    sides: &[usize],
    threads: Option<usize>,
) -> Result<Vec<YNormRow>> {
    let mut cfg = cfg.clone();
    cfg.task = Task::DiagYnorm;
    cfg.sweep = None;
    cfg.fermi = p;
    cfg.diag.l_list = sides.to_vec();
    cfg.validate()?;
    let est = ensemble::run(&cfg, &RunOptions { threads, ..Default::default() })?;
    let s = est
        .series("ynorm")
        .ok_or_else(|| Error::Input("ynorm series missing from the estimate".into()))?;
    Ok(sides
        .iter()
        .enumerate()
        .map(|(i, &side)| YNormRow {
            side,
            mean: s.mean[i],
            stderr: s.stderr[i],
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MottRow {
    pub nu: f64,
    /// `Σ([0, ν])`.
    pub mass: f64,
    /// `[ν^{-1} Σ([0, ν])] / [ν² (log 1/ν)^{d+2}]`.
    pub ratio: f64,
}

pub fn mott_ratio(mass: f64, nu: f64, d: usize) -> f64 {
    mass / nu / (nu * nu * (1.0 / nu).ln().powi(d as i32 + 2))
}

/// Mott ratios of `Σ` on `nu_grid ⊂ ]0, 1[`.
pub fn mott_probe(sigma: &SpectralMeasure, d: usize, nu_grid: &[f64]) -> Result<Vec<MottRow>> {
    let masses: Vec<f64> = nu_grid.iter().map(|&nu| sigma.mass_in(0.0, nu)).collect();
    mott_table(&masses, d, nu_grid)
}

fn mott_table(masses: &[f64], d: usize, nu_grid: &[f64]) -> Result<Vec<MottRow>> {
    if nu_grid.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Domain("Mott probe frequencies must lie in ]0, 1[".into()));
    }
    Ok(nu_grid
        .iter()
        .zip(masses)
        .map(|(&nu, &mass)| MottRow {
            nu,
            mass,
            ratio: mott_ratio(mass, nu, d),
        })
        .collect())
}

/// Mott ratios of the ensemble-mean `Σ_μ^0` of `cfg`.
pub fn mott_probe_ensemble(cfg: &RunConfig, threads: Option<usize>) -> Result<Vec<MottRow>> {
    let mut cfg = cfg.clone();
    cfg.task = Task::DiagMott;
    cfg.sweep = None;
    let est = ensemble::run(&cfg, &RunOptions { threads, ..Default::default() })?;
    let s = est
        .series("mott_mass")
        .ok_or_else(|| Error::Input("mott series missing from the estimate".into()))?;
    mott_table(&s.mean, cfg.lattice.d, &cfg.diag.nu_grid)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub energy: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreeOracleResult {
    pub d: usize,
    #[serde(rename = "L")]
    pub side: usize,
    /// Exact `Ψ`, masses merged at coinciding energies.
    pub psi: Vec<OracleRow>,
    pub dos: Vec<OracleRow>,
    pub bandwidth: f64,
    /// Kernel-smoothed `ψ` on an energy grid.
    pub smoothed: Vec<OracleRow>,
}

impl FreeOracleResult {
    pub fn psi_measure(&self) -> SpectralMeasure {
        SpectralMeasure::from_points(
            0.0,
            self.psi.iter().map(|r| PointMass::new(r.energy, r.weight)).collect(),
        )
    }

    pub fn psi_mass_at(&self, energy: f64) -> f64 {
        self.psi
            .iter()
            .filter(|r| (r.energy - energy).abs() <= 1e-9)
            .map(|r| r.weight)
            .sum()
    }

    pub fn smoothed_at(&self, energy: f64) -> f64 {
        kde_density(&self.psi_measure(), energy, self.bandwidth)
    }
}

fn merge_rows(mut rows: Vec<OracleRow>) -> Vec<OracleRow> {
    rows.sort_by(|a, b| a.energy.total_cmp(&b.energy));
    let mut out: Vec<OracleRow> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some(last) if (r.energy - last.energy).abs() <= 1e-9 => last.weight += r.weight,
            _ => out.push(r),
        }
    }
    out
}

/// Exact `Ψ` and DOS of the periodic free Laplacian from its Fourier modes:
/// mode `k` sits at `Σ_j 2 cos(2π k_j / L)` with `Ψ` weight
/// `(4π / L^d) sin²(2π k₁ / L)`.
pub fn free_oracle(d: usize, side: usize) -> Result<FreeOracleResult> {
    LatticeSpec::new(d, side, Boundary::Periodic)?;
    let n = side.pow(d as u32);
    let scale = 1.0 / n as f64;
    let mut psi = Vec::with_capacity(n);
    let mut dos = Vec::with_capacity(n);
    let mut k = vec![0usize; d];
    for _ in 0..n {
        let angle = |kj: usize| 2.0 * PI * kj as f64 / side as f64;
        // cos and sin of rational angles carry ~1e-16 residue where the
        // exact value is 0; snap it so the zero-energy atom prints as 0
        let snap = |x: f64| if x.abs() < 1e-12 { 0.0 } else { x };
        let energy: f64 = snap(k.iter().map(|&kj| 2.0 * angle(kj).cos()).sum());
        let w = 4.0 * PI * scale * snap(angle(k[0]).sin()).powi(2);
        psi.push(OracleRow { energy, weight: w });
        dos.push(OracleRow { energy, weight: scale });
        for kj in k.iter_mut() {
            *kj += 1;
            if *kj < side {
                break;
            }
            *kj = 0;
        }
    }
    let psi = merge_rows(psi.into_iter().filter(|r| r.weight > 0.0).collect());
    let dos = merge_rows(dos);
    let width = dos.last().map_or(0.0, |r| r.energy) - dos.first().map_or(0.0, |r| r.energy);
    let bandwidth = DEFAULT_KDE_SCALE * width * (n as f64).powf(-1.0 / 3.0);
    let mut result = FreeOracleResult {
        d,
        side,
        psi,
        dos,
        bandwidth,
        smoothed: Vec::new(),
    };
    let edge = 2.0 * d as f64 + 0.5;
    let measure = result.psi_measure();
    result.smoothed = crate::response::uniform_grid(-edge, edge, 201)
        .into_iter()
        .map(|e| OracleRow {
            energy: e,
            weight: kde_density(&measure, e, bandwidth),
        })
        .collect();
    Ok(result)
}

/// `(2π)^{-d} ∫ g(Σ_j 2 cos k_j) dk` by the periodic midpoint rule.
pub fn free_trace_value(d: usize, g: impl Fn(f64) -> f64) -> f64 {
    let m: usize = match d {
        1 => 1 << 16,
        2 => 1024,
        _ => 96,
    };
    let total = m.pow(d as u32);
    let mut k = vec![0usize; d];
    let mut acc = 0.0;
    for _ in 0..total {
        let e: f64 = k
            .iter()
            .map(|&kj| 2.0 * (2.0 * PI * (kj as f64 + 0.5) / m as f64).cos())
            .sum();
        acc += g(e);
        for kj in k.iter_mut() {
            *kj += 1;
            if *kj < m {
                break;
            }
            *kj = 0;
        }
    }
    acc / total as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreeConsistencyReport {
    pub d: usize,
    #[serde(rename = "L")]
    pub side: usize,
    pub mu: f64,
    #[serde(rename = "T")]
    pub temperature: f64,
    pub gamma_mass: f64,
    pub atom: f64,
    pub sigma_mass: f64,
    /// The oracle's prediction for the atom.
    pub oracle_atom: f64,
    pub bandwidth: f64,
    pub mismatches: Vec<String>,
}

impl FreeConsistencyReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Runs the Kubo pipeline on the free Laplacian and compares with the
/// Fourier oracle: `Γ = 0`, `Σ` is its atom, and the atom is `ψ(μ)`.
pub fn free_consistency(d: usize, side: usize, p: FermiParams) -> Result<FreeConsistencyReport> {
    let lattice = LatticeSpec::new(d, side, Boundary::Periodic)?;
    let h = assemble_hamiltonian(&lattice, &vec![0.0; lattice.sites()], 0.0)?;
    let eig = diagonalize(&h)?;
    let data = KuboData::new(&eig, &hopping_velocity(&lattice), DEFAULT_KDE_SCALE)?;
    let sigma = data.sigma(p)?;
    let gamma_mass = sigma.point_mass();
    let oracle = free_oracle(d, side)?;
    let oracle_atom = if p.temperature > 0.0 {
        oracle
            .psi
            .iter()
            .map(|r| r.weight * derivative_weight(r.energy, p.mu, p.temperature))
            .sum()
    } else {
        oracle.smoothed_at(p.mu)
    };
    let bandwidth = default_bandwidth(&eig, DEFAULT_KDE_SCALE);
    let mut mismatches = Vec::new();
    if gamma_mass > 1e-10 {
        mismatches.push(format!("Γ mass {gamma_mass:e} exceeds 1e-10"));
    }
    if (sigma.total_mass() - sigma.atom_at_zero).abs() > 1e-10 {
        mismatches.push("Σ carries mass off the atom".into());
    }
    let atom_gap = (sigma.atom_at_zero - oracle_atom).abs();
    if atom_gap > 1e-8 * (1.0 + oracle_atom) {
        mismatches.push(format!(
            "atom {} differs from oracle ψ(μ) = {oracle_atom} by {atom_gap:e}",
            sigma.atom_at_zero
        ));
    }
    if p.mu.abs() > 2.0 * d as f64 && sigma.total_mass() > 1e-10 {
        mismatches.push(format!("Σ mass {} outside the band", sigma.total_mass()));
    }
    Ok(FreeConsistencyReport {
        d,
        side,
        mu: p.mu,
        temperature: p.temperature,
        gamma_mass,
        atom: sigma.atom_at_zero,
        sigma_mass: sigma.total_mass(),
        oracle_atom,
        bandwidth,
        mismatches,
    })
}
