//! Check suites run by `kubolab check`: exact per-realization identities and
//! the free-Laplacian comparisons.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{free_consistency, free_oracle};
use crate::ensemble::{plan, velocity_for, RunConfig};
use crate::error::Result;
use crate::kubo::{convolution_check, fermi_reconstruction_error, gamma_measure, mass_two_path_check, KuboData, QuadratureSpec};
use crate::measure::Bins;
use crate::model::{position_operator, realize, Boundary};
use crate::spectral::{diagonalize, dos_measure, FermiParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Identities,
    Free,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn at_most(name: impl Into<String>, value: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        CheckResult {
            name: name.into(),
            passed: value <= tolerance,
            value,
            tolerance,
            detail: detail.into(),
        }
    }
}

pub fn run_suite(suite: Suite, cfg: &RunConfig, max_realizations: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Identities | Suite::All) {
        out.extend(identity_suite(cfg, max_realizations)?);
    }
    if matches!(suite, Suite::Free | Suite::All) {
        out.extend(free_suite()?);
    }
    Ok(out)
}

/// Exact finite-volume identities on the first realizations of `cfg`.
pub fn identity_suite(cfg: &RunConfig, max_realizations: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let bins = Bins::symmetric(
        {
            let (lo, hi) = cfg.disorder.spectrum_bounds(&cfg.lattice);
            hi - lo
        },
        400,
    )?;
    let warm_t = if cfg.fermi.temperature > 0.0 { cfg.fermi.temperature } else { 0.2 };
    let temps = [0.0, warm_t];
    let energy = cfg.energy_bins()?;
    for unit in plan(cfg)?.into_iter().take(max_realizations.max(1) as usize) {
        let i = unit.realization_index;
        let h = realize(&cfg.lattice, &cfg.disorder, i, cfg.max_sites)?;
        let eig = diagonalize(&h)?;
        let vel = velocity_for(&h)?;
        out.push(CheckResult::at_most(
            format!("velocity hermiticity [r{i}]"),
            vel.hermiticity_defect(),
            1e-14,
            "max |V - V^†|",
        ));
        let data = KuboData::new(&eig, &vel, cfg.kde_scale)?;
        let marg = data.phi.marginal(&energy, true);
        let marg2 = data.phi.marginal(&energy, false);
        let defect = marg.iter().zip(&marg2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        out.push(CheckResult::at_most(format!("Φ marginals agree [r{i}]"), defect, 1e-12, "sup over energy bins"));

        let dos = dos_measure(&eig).bin(&energy);
        let psi = data.psi.bin(&energy);
        let excess = psi
            .iter()
            .zip(&dos)
            .map(|(p, n)| p - 4.0 * PI * n)
            .fold(f64::NEG_INFINITY, f64::max);
        out.push(CheckResult::at_most(format!("Ψ <= 4π N per bin [r{i}]"), excess, 1e-12, "max of Ψ(B) - 4πN(B)"));

        for t in temps {
            let p = FermiParams::new(cfg.fermi.mu, t)?;
            let sigma = data.sigma(p)?;
            out.push(CheckResult::at_most(
                format!("evenness T={t} [r{i}]"),
                sigma.evenness_defect(&bins)?,
                1e-12,
                "max |Σ(B) - Σ(-B)| over 400 bins",
            ));
            if cfg.lattice.boundary == Boundary::Dirichlet {
                let m = mass_two_path_check(&eig, &vel, &position_operator(&cfg.lattice), p)?;
                out.push(CheckResult::at_most(
                    format!("two-path mass T={t} [r{i}]"),
                    (m.mass_a - m.mass_b).abs(),
                    1e-8 * (1.0 + m.mass_a),
                    format!("massA = {}, massB = {}", m.mass_a, m.mass_b),
                ));
            }
        }

        let p = FermiParams::new(cfg.fermi.mu, warm_t)?;
        let quad = QuadratureSpec::default();
        let conv = convolution_check(&eig, &vel, p, quad, &bins)?;
        out.push(CheckResult {
            name: format!("convolution T={warm_t} [r{i}]"),
            passed: conv.max_discrepancy <= quad.tolerance && !conv.under_resolved,
            value: conv.max_discrepancy,
            tolerance: quad.tolerance,
            detail: format!("{} panels, refinement change {:e}", conv.panels, conv.refinement_change),
        });

        // μ midway between the two central eigenvalues
        let e = &eig.eigenvalues;
        let k = e.len() / 2;
        if k >= 1 && e[k] - e[k - 1] > eig.degeneracy_tolerance() {
            let gap = e[k] - e[k - 1];
            let mid = FermiParams::new(0.5 * (e[k] + e[k - 1]), 0.0)?;
            let g = gamma_measure(&data.phi, mid);
            out.push(CheckResult::at_most(
                format!("gap support [r{i}]"),
                g.mass_in(-0.99 * gap, 0.99 * gap),
                0.0,
                format!("local gap {gap:e}"),
            ));
        }
    }
    let p = FermiParams::new(cfg.fermi.mu, warm_t)?;
    let ts: Vec<f64> = (0..=400).map(|k| p.mu - 10.0 + 0.05 * k as f64).collect();
    out.push(CheckResult::at_most(
        "Fermi reconstruction",
        fermi_reconstruction_error(p, &ts, QuadratureSpec::default())?,
        1e-10,
        "sup_t |f(t) - ∫(-f)'(s) 1[t <= s] ds|",
    ));
    Ok(out)
}

/// Free-Laplacian oracle comparisons at the standard sizes.
pub fn free_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let o = free_oracle(1, 8)?;
    out.push(CheckResult::at_most("oracle Ψ({0}) = π (d=1, L=8)", (o.psi_mass_at(0.0) - PI).abs(), 1e-12, ""));
    let total: f64 = o.psi.iter().map(|r| r.weight).sum();
    out.push(CheckResult::at_most("oracle Ψ mass = 2π (d=1, L=8)", (total - 2.0 * PI).abs(), 1e-12, ""));
    for (d, side, mu) in [(1, 64, 0.0), (1, 64, 3.0), (2, 12, 0.0), (2, 12, 4.5)] {
        let r = free_consistency(d, side, FermiParams::new(mu, 0.0)?)?;
        out.push(CheckResult {
            name: format!("free pipeline d={d} L={side} μ={mu}"),
            passed: r.passed(),
            value: r.gamma_mass,
            tolerance: 1e-10,
            detail: if r.passed() {
                format!("atom {} vs oracle {}", r.atom, r.oracle_atom)
            } else {
                r.mismatches.join("; ")
            },
        });
    }
    Ok(out)
}
