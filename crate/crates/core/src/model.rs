//! Finite-volume Anderson Hamiltonian `H = A + λ diag(V)` on a box of
//! `L^d` sites, together with the position and velocity operators in the
//! first lattice direction.
//!
//! `A` is the adjacency matrix of the lattice graph (the negative of the
//! centered Laplacian), so the free spectrum lies in `[-2d, 2d]`.

use faer::Mat;
use num_complex::Complex64;
use rand::distr::weighted::WeightedIndex;
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the number of sites handled by the dense eigensolver.
pub const DEFAULT_MAX_SITES: usize = 4000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Dirichlet,
    Periodic,
}

/// A `d`-dimensional cube of side `L`.
///
/// Sites are indexed with the first coordinate running fastest:
/// `index = x_1 + L x_2 + L^2 x_3 + ...`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub d: usize,
    #[serde(rename = "L")]
    pub side: usize,
    pub boundary: Boundary,
}

impl LatticeSpec {
    pub fn new(d: usize, side: usize, boundary: Boundary) -> Result<Self> {
        let spec = LatticeSpec { d, side, boundary };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config("lattice.d", "dimension must be at least 1"));
        }
        if self.side < 3 {
            return Err(Error::config("lattice.L", "side length must be at least 3"));
        }
        let n = (self.side as u128).checked_pow(self.d as u32);
        if n.map_or(true, |n| n > u32::MAX as u128) {
            return Err(Error::config("lattice", "site count overflows"));
        }
        Ok(())
    }

    /// Number of sites `N = L^d`.
    pub fn sites(&self) -> usize {
        self.side.pow(self.d as u32)
    }

    /// Offset subtracted from raw coordinates so the box is centered at 0.
    pub fn origin(&self) -> usize {
        self.side / 2
    }

    pub fn coords(&self, index: usize) -> Vec<usize> {
        let mut rest = index;
        (0..self.d)
            .map(|_| {
                let c = rest % self.side;
                rest /= self.side;
                c
            })
            .collect()
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords.iter().rev().fold(0, |acc, &c| acc * self.side + c)
    }

    /// Index of the site whose coordinates are all `floor(L/2)`.
    pub fn center(&self) -> usize {
        self.index(&vec![self.origin(); self.d])
    }

    /// Centered first coordinate `x_1 - floor(L/2)` of a site.
    pub fn centered_x1(&self, index: usize) -> i64 {
        (index % self.side) as i64 - self.origin() as i64
    }

    /// Neighbor of `index` one step along `axis`, forward or backward.
    /// Dirichlet boxes have no neighbor across the boundary.
    pub fn neighbor(&self, index: usize, axis: usize, forward: bool) -> Option<usize> {
        let stride = self.side.pow(axis as u32);
        let c = (index / stride) % self.side;
        let base = index - c * stride;
        let next = match (forward, self.boundary) {
            (true, _) if c + 1 < self.side => c + 1,
            (false, _) if c > 0 => c - 1,
            (_, Boundary::Dirichlet) => return None,
            (true, Boundary::Periodic) => 0,
            (false, Boundary::Periodic) => self.side - 1,
        };
        Some(base + next * stride)
    }

    pub fn neighbors(&self, index: usize) -> Vec<usize> {
        (0..self.d)
            .flat_map(|axis| [true, false].map(|fw| self.neighbor(index, axis, fw)))
            .flatten()
            .collect()
    }

    /// Site at centered offset `offset` from the center along the first axis.
    pub fn axis_site(&self, offset: i64) -> Option<usize> {
        let raw = self.origin() as i64 + offset;
        if raw < 0 || raw >= self.side as i64 {
            return None;
        }
        Some(self.center() - self.origin() + raw as usize)
    }
}

/// Single-site distribution of the random potential.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Density {
    /// Uniform on `[-W/2, W/2]`.
    Uniform {
        #[serde(rename = "W")]
        width: f64,
    },
    Discrete {
        values: Vec<f64>,
        probabilities: Vec<f64>,
    },
}

impl Density {
    pub fn validate(&self) -> Result<()> {
        match self {
            Density::Uniform { width } => {
                if !(width.is_finite() && *width > 0.0) {
                    return Err(Error::config(
                        "disorder.density.W",
                        format!("width must be positive and finite, got {width}"),
                    ));
                }
            }
            Density::Discrete {
                values,
                probabilities,
            } => {
                if values.is_empty() || values.len() != probabilities.len() {
                    return Err(Error::config(
                        "disorder.density.probabilities",
                        "values and probabilities must be non-empty and of equal length",
                    ));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::config("disorder.density.values", "non-finite value"));
                }
                if probabilities.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    return Err(Error::config(
                        "disorder.density.probabilities",
                        "probabilities must be non-negative",
                    ));
                }
                let total: f64 = probabilities.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::config(
                        "disorder.density.probabilities",
                        format!("probabilities sum to {total}, not 1"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Closed interval containing the support.
    pub fn support(&self) -> (f64, f64) {
        match self {
            Density::Uniform { width } => (-width / 2.0, width / 2.0),
            Density::Discrete { values, .. } => values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                }),
        }
    }

    /// Sup-norm of the density, when it has one.
    pub fn sup_norm(&self) -> Option<f64> {
        match self {
            Density::Uniform { width } => Some(1.0 / width),
            Density::Discrete { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisorderSpec {
    pub density: Density,
    pub lambda: f64,
    pub master_seed: u64,
}

impl DisorderSpec {
    pub fn uniform(width: f64, lambda: f64, master_seed: u64) -> Self {
        DisorderSpec {
            density: Density::Uniform { width },
            lambda,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.density.validate()?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config(
                "disorder.lambda",
                format!("disorder strength must be finite and non-negative, got {}", self.lambda),
            ));
        }
        Ok(())
    }

    /// A-priori interval containing the spectrum of every realization.
    pub fn spectrum_bounds(&self, lattice: &LatticeSpec) -> (f64, f64) {
        let (lo, hi) = self.density.support();
        let two_d = 2.0 * lattice.d as f64;
        (-two_d + self.lambda * lo, two_d + self.lambda * hi)
    }
}

/// The per-realization ChaCha8 stream: seeded by the master seed, with the
/// realization index selecting the stream. Samples therefore do not depend on
/// the order in which realizations are generated.
pub fn realization_rng(master_seed: u64, realization_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(realization_index);
    rng
}

/// 64-bit identifier of a realization stream, recorded in metadata.
pub fn derived_seed(master_seed: u64, realization_index: u64) -> u64 {
    splitmix64(master_seed ^ splitmix64(realization_index.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Draws the `N` i.i.d. on-site values of one realization.
pub fn sample_potential(
    spec: &DisorderSpec,
    lattice: &LatticeSpec,
    realization_index: u64,
) -> Result<Vec<f64>> {
    spec.validate()?;
    lattice.validate()?;
    let n = lattice.sites();
    let mut rng = realization_rng(spec.master_seed, realization_index);
    let out = match &spec.density {
        Density::Uniform { width } => {
            let dist = Uniform::new_inclusive(-width / 2.0, width / 2.0)
                .map_err(|e| Error::config("disorder.density.W", e.to_string()))?;
            dist.sample_iter(&mut rng).take(n).collect()
        }
        Density::Discrete {
            values,
            probabilities,
        } => {
            let dist = WeightedIndex::new(probabilities)
                .map_err(|e| Error::config("disorder.density.probabilities", e.to_string()))?;
            dist.sample_iter(&mut rng).take(n).map(|i| values[i]).collect()
        }
    };
    Ok(out)
}

/// Identifies the disorder realization a derived quantity came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RealizationMeta {
    pub realization_index: u64,
    pub seed: u64,
}

pub struct HamiltonianRealization {
    pub lattice: LatticeSpec,
    pub potential: Vec<f64>,
    pub lambda: f64,
    pub matrix: Mat<f64>,
    pub meta: RealizationMeta,
}

impl HamiltonianRealization {
    pub fn sites(&self) -> usize {
        self.potential.len()
    }
}

/// `H = A + λ diag(potential)` with `A` the lattice adjacency matrix.
pub fn assemble_hamiltonian(
    lattice: &LatticeSpec,
    potential: &[f64],
    lambda: f64,
) -> Result<HamiltonianRealization> {
    lattice.validate()?;
    let n = lattice.sites();
    if potential.len() != n {
        return Err(Error::Input(format!(
            "potential has {} entries but the lattice has {n} sites",
            potential.len()
        )));
    }
    let mut matrix = Mat::<f64>::zeros(n, n);
    for x in 0..n {
        matrix[(x, x)] = lambda * potential[x];
        for y in lattice.neighbors(x) {
            matrix[(x, y)] = 1.0;
        }
    }
    Ok(HamiltonianRealization {
        lattice: lattice.clone(),
        potential: potential.to_vec(),
        lambda,
        matrix,
        meta: RealizationMeta::default(),
    })
}

/// Samples and assembles realization `realization_index`, refusing boxes
/// larger than `max_sites`.
pub fn realize(
    lattice: &LatticeSpec,
    disorder: &DisorderSpec,
    realization_index: u64,
    max_sites: usize,
) -> Result<HamiltonianRealization> {
    lattice.validate()?;
    if lattice.sites() > max_sites {
        return Err(Error::config(
            "lattice",
            format!(
                "{} sites exceed the dense-solver cap of {max_sites}",
                lattice.sites()
            ),
        ));
    }
    let potential = sample_potential(disorder, lattice, realization_index)?;
    let mut h = assemble_hamiltonian(lattice, &potential, disorder.lambda)?;
    h.meta = RealizationMeta {
        realization_index,
        seed: derived_seed(disorder.master_seed, realization_index),
    };
    Ok(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    Position,
    Velocity,
}

/// A dense complex operator on the site space, stored as separate real and
/// imaginary parts (every operator here is either real or purely imaginary).
#[derive(Clone, Debug)]
pub struct SiteOperator {
    pub kind: OperatorKind,
    pub re: Mat<f64>,
    pub im: Mat<f64>,
}

impl SiteOperator {
    pub fn dim(&self) -> usize {
        self.re.nrows()
    }

    pub fn entry(&self, row: usize, col: usize) -> Complex64 {
        Complex64::new(self.re[(row, col)], self.im[(row, col)])
    }

    /// `max |O - O^†|` over all entries.
    pub fn hermiticity_defect(&self) -> f64 {
        let n = self.dim();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let d = self.entry(i, j) - self.entry(j, i).conj();
                worst = worst.max(d.norm());
            }
        }
        worst
    }

    /// `(1/N) Σ |O_xy|²`.
    pub fn frobenius_mass_per_site(&self) -> f64 {
        let n = self.dim();
        let mut total = 0.0;
        for j in 0..n {
            for i in 0..n {
                total += self.re[(i, j)].powi(2) + self.im[(i, j)].powi(2);
            }
        }
        total / n as f64
    }

    /// Diagonal of the real part; the position operator lives here.
    pub fn real_diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.re[(i, i)]).collect()
    }

    /// Returns a copy with `shift` added to the diagonal.
    pub fn shifted(&self, shift: f64) -> SiteOperator {
        let mut out = self.clone();
        for i in 0..out.dim() {
            out.re[(i, i)] += shift;
        }
        out
    }
}

/// Multiplication by the centered first coordinate `x_1 - floor(L/2)`.
pub fn position_operator(lattice: &LatticeSpec) -> SiteOperator {
    let n = lattice.sites();
    let mut re = Mat::<f64>::zeros(n, n);
    for x in 0..n {
        re[(x, x)] = lattice.centered_x1(x) as f64;
    }
    SiteOperator {
        kind: OperatorKind::Position,
        re,
        im: Mat::zeros(n, n),
    }
}

/// `i[H, X_1]`, entrywise `i H_xy (X_yy - X_xx)`.
///
/// Only defined on Dirichlet boxes; on the torus `X_1` jumps across the seam
/// and the commutator is not the physical velocity (use [`hopping_velocity`]).
pub fn velocity_operator(h: &HamiltonianRealization, x1: &SiteOperator) -> Result<SiteOperator> {
    if h.lattice.boundary == Boundary::Periodic {
        return Err(Error::Input(
            "commutator velocity is undefined on a periodic box; use hopping_velocity".into(),
        ));
    }
    if x1.kind != OperatorKind::Position {
        return Err(Error::Input("velocity_operator expects a position operator".into()));
    }
    let n = h.sites();
    if x1.dim() != n {
        return Err(Error::Input(format!(
            "position operator has dimension {} but H has {n}",
            x1.dim()
        )));
    }
    let pos = x1.real_diagonal();
    let im = Mat::from_fn(n, n, |x, y| h.matrix[(x, y)] * (pos[y] - pos[x]));
    Ok(SiteOperator {
        kind: OperatorKind::Velocity,
        re: Mat::zeros(n, n),
        im,
    })
}

/// Translation-invariant form `i[A, X_1]`: entry `+i` at `(x, x+e_1)` and `-i`
/// at `(x+e_1, x)` for every bond along the first axis, including the seam
/// bond of a periodic box.
pub fn hopping_velocity(lattice: &LatticeSpec) -> SiteOperator {
    let n = lattice.sites();
    let mut im = Mat::<f64>::zeros(n, n);
    for x in 0..n {
        if let Some(y) = lattice.neighbor(x, 0, true) {
            im[(x, y)] = 1.0;
            im[(y, x)] = -1.0;
        }
    }
    SiteOperator {
        kind: OperatorKind::Velocity,
        re: Mat::zeros(n, n),
        im,
    }
}
