//! Finite positive measures on the line and on the plane, as weighted point
//! masses with optional histogram views.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RealizationMeta;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMass {
    pub location: f64,
    pub weight: f64,
}

impl PointMass {
    pub fn new(location: f64, weight: f64) -> Self {
        PointMass { location, weight }
    }
}

/// Uniform binning of `[lo, hi)` into `count` bins.
///
/// When the grid is symmetric about zero with an even bin count, the bin of
/// `x` is located through `|x|` and mirrored, so `x` and `-x` land in mirror
/// bins exactly. Positive bins are `[a, b)`, negative ones `(-b, -a]`; zero
/// belongs to the first positive bin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bins {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Bins {
    pub fn new(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) || count == 0 {
            return Err(Error::Input(format!(
                "invalid binning [{lo}, {hi}) with {count} bins"
            )));
        }
        Ok(Bins { lo, hi, count })
    }

    /// `count` bins over `[-half_width, half_width)`.
    pub fn symmetric(half_width: f64, count: usize) -> Result<Self> {
        Bins::new(-half_width, half_width, count)
    }

    pub fn is_mirrored(&self) -> bool {
        self.lo == -self.hi && self.count % 2 == 0
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.count as f64
    }

    pub fn left(&self, i: usize) -> f64 {
        if i == 0 {
            self.lo
        } else if self.is_mirrored() {
            let half = self.count / 2;
            if i >= half {
                (i - half) as f64 * self.width()
            } else {
                -((half - i) as f64 * self.width())
            }
        } else {
            self.lo + i as f64 * self.width()
        }
    }

    pub fn right(&self, i: usize) -> f64 {
        if i + 1 == self.count {
            self.hi
        } else {
            self.left(i + 1)
        }
    }

    pub fn center(&self, i: usize) -> f64 {
        0.5 * (self.left(i) + self.right(i))
    }

    pub fn index_of(&self, x: f64) -> Option<usize> {
        if !x.is_finite() {
            return None;
        }
        let w = self.width();
        if self.is_mirrored() {
            let half = self.count / 2;
            let k = (x.abs() / w).floor();
            if x.abs() >= self.hi || k >= half as f64 {
                return None;
            }
            let k = (k as usize).min(half - 1);
            return Some(if x >= 0.0 { half + k } else { half - 1 - k });
        }
        if x < self.lo || x >= self.hi {
            return None;
        }
        Some((((x - self.lo) / w) as usize).min(self.count - 1))
    }

    /// Index of the bin mirrored through zero (mirrored grids only).
    pub fn mirror(&self, i: usize) -> usize {
        self.count - 1 - i
    }
}

/// A finite positive measure: an explicit atom at zero plus point masses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpectralMeasure {
    pub atom_at_zero: f64,
    pub points: Vec<PointMass>,
}

impl SpectralMeasure {
    pub fn zero() -> Self {
        SpectralMeasure::default()
    }

    pub fn from_points(atom_at_zero: f64, points: Vec<PointMass>) -> Self {
        SpectralMeasure {
            atom_at_zero,
            points,
        }
    }

    pub fn atom(weight: f64) -> Self {
        SpectralMeasure::from_points(weight, Vec::new())
    }

    pub fn point_mass(&self) -> f64 {
        self.points.iter().map(|p| p.weight).sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.atom_at_zero + self.point_mass()
    }

    /// Mass of the closed interval `[a, b]`, atom included when `0 ∈ [a, b]`.
    pub fn mass_in(&self, a: f64, b: f64) -> f64 {
        let atom = if a <= 0.0 && 0.0 <= b {
            self.atom_at_zero
        } else {
            0.0
        };
        atom + self
            .points
            .iter()
            .filter(|p| a <= p.location && p.location <= b)
            .map(|p| p.weight)
            .sum::<f64>()
    }

    /// Mass at a single location, collecting points within `tol` of it.
    pub fn mass_at(&self, x: f64, tol: f64) -> f64 {
        self.mass_in(x - tol, x + tol)
    }

    /// `∫ g dμ`.
    pub fn integrate(&self, g: impl Fn(f64) -> f64) -> f64 {
        let atom = if self.atom_at_zero != 0.0 {
            self.atom_at_zero * g(0.0)
        } else {
            0.0
        };
        atom + self.points.iter().map(|p| p.weight * g(p.location)).sum::<f64>()
    }

    /// Histogram of the point masses (the atom is reported separately).
    pub fn bin(&self, bins: &Bins) -> Vec<f64> {
        let mut out = vec![0.0; bins.count];
        for p in &self.points {
            if let Some(i) = bins.index_of(p.location) {
                out[i] += p.weight;
            }
        }
        out
    }

    /// `max_i |m(B_i) - m(-B_i)|` over a mirrored grid.
    pub fn evenness_defect(&self, bins: &Bins) -> Result<f64> {
        if !bins.is_mirrored() {
            return Err(Error::Input("evenness needs a mirrored binning".into()));
        }
        let h = self.bin(bins);
        Ok((0..bins.count)
            .map(|i| (h[i] - h[bins.mirror(i)]).abs())
            .fold(0.0, f64::max))
    }

    /// Sum of two measures.
    pub fn add(&self, other: &SpectralMeasure) -> SpectralMeasure {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        SpectralMeasure::from_points(self.atom_at_zero + other.atom_at_zero, points)
    }

    pub fn scaled(&self, factor: f64) -> SpectralMeasure {
        SpectralMeasure::from_points(
            self.atom_at_zero * factor,
            self.points
                .iter()
                .map(|p| PointMass::new(p.location, p.weight * factor))
                .collect(),
        )
    }

    /// Convex hull of the locations carrying positive weight.
    pub fn support_hull(&self) -> Option<(f64, f64)> {
        self.points
            .iter()
            .filter(|p| p.weight > 0.0)
            .fold(None, |acc, p| match acc {
                None => Some((p.location, p.location)),
                Some((lo, hi)) => Some((lo.min(p.location), hi.max(p.location))),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub lambda1: f64,
    pub lambda2: f64,
    pub weight: f64,
}

/// Weighted point masses on the plane at pairs of eigenvalues.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMeasure {
    pub entries: Vec<PairEntry>,
    pub volume: usize,
    /// Pairs closer than this are degenerate (kernel of the Liouvillian).
    pub degeneracy_tolerance: f64,
    pub meta: RealizationMeta,
}

impl PairMeasure {
    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|e| e.weight).sum()
    }

    /// Histogram of the first (`first = true`) or second marginal.
    pub fn marginal(&self, bins: &Bins, first: bool) -> Vec<f64> {
        let mut out = vec![0.0; bins.count];
        for e in &self.entries {
            let x = if first { e.lambda1 } else { e.lambda2 };
            if let Some(i) = bins.index_of(x) {
                out[i] += e.weight;
            }
        }
        out
    }

    /// Row-major 2-d histogram over `bins × bins`.
    pub fn histogram(&self, bins: &Bins) -> Vec<f64> {
        let mut out = vec![0.0; bins.count * bins.count];
        for e in &self.entries {
            if let (Some(i), Some(j)) = (bins.index_of(e.lambda1), bins.index_of(e.lambda2)) {
                out[i * bins.count + j] += e.weight;
            }
        }
        out
    }

    /// Mass on the near-diagonal `|λ1 - λ2| <= tol`.
    pub fn diagonal_mass(&self, tol: f64) -> f64 {
        self.entries
            .iter()
            .filter(|e| (e.lambda1 - e.lambda2).abs() <= tol)
            .map(|e| e.weight)
            .sum()
    }
}

/// One row of a binned measure table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin_left: f64,
    pub bin_right: f64,
    pub mass: f64,
    pub stderr: Option<f64>,
}

pub fn bin_rows(bins: &Bins, mass: &[f64], stderr: Option<&[f64]>) -> Vec<BinRow> {
    (0..bins.count)
        .map(|i| BinRow {
            bin_left: bins.left(i),
            bin_right: bins.right(i),
            mass: mass[i],
            stderr: stderr.map(|s| s[i]),
        })
        .collect()
}

/// Writes `bin_left,bin_right,mass,stderr` with LF line endings; an undefined
/// standard error is left empty.
pub fn write_bin_csv<W: Write>(out: W, rows: &[BinRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(["bin_left", "bin_right", "mass", "stderr"])?;
    for r in rows {
        w.write_record([
            r.bin_left.to_string(),
            r.bin_right.to_string(),
            r.mass.to_string(),
            r.stderr.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// JSON envelope of a binned measure: the atom is kept apart from the bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureEnvelope {
    pub atom_at_zero: f64,
    pub atom_stderr: Option<f64>,
    pub total_mass: f64,
    pub bins: Vec<BinRow>,
    pub meta: serde_json::Value,
}

impl MeasureEnvelope {
    pub fn from_measure(measure: &SpectralMeasure, bins: &Bins, meta: serde_json::Value) -> Self {
        MeasureEnvelope {
            atom_at_zero: measure.atom_at_zero,
            atom_stderr: None,
            total_mass: measure.total_mass(),
            bins: bin_rows(bins, &measure.bin(bins), None),
            meta,
        }
    }
}
