//! Finite-volume Kubo conductivity for the Anderson model on `Z^d`.
//!
//! A realization `H = -Δ + λ V_ω` is assembled on a box, diagonalized
//! densely, and every conductivity object is then an exact finite sum over
//! eigen-pairs. The modules follow that pipeline:
//!
//! * [`model`] lattices, disorder, Hamiltonians, position and velocity;
//! * [`spectral`] eigensystems, Fermi functions, functional calculus;
//! * [`kubo`] the measures `Φ`, `Ψ`, `Γ`, `Σ` and their identities;
//! * [`response`] adiabatic currents and smoothed conductivities;
//! * [`diagnostics`] localization probes and free-case oracles;
//! * [`ensemble`] configured runs, disorder averages, output files.

pub mod checks;
pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod kubo;
pub mod measure;
pub mod model;
pub mod quadrature;
pub mod response;
pub mod spectral;

pub use error::{Error, Result};
pub use kubo::{KernelF, KuboData};
pub use measure::{Bins, PairMeasure, PointMass, SpectralMeasure};
pub use model::{
    Boundary, Density, DisorderSpec, HamiltonianRealization, LatticeSpec, SiteOperator,
};
pub use spectral::{diagonalize, EigenSystem, FermiParams};
