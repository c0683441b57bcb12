//! Disorder-averaged runs: configuration, planning, execution, statistics
//! and the run-directory layout.
//!
//! A run is a list of work units, one per realization index. Units are
//! independent and may run on any number of workers; the reducer folds them
//! in index order, so the estimate does not depend on scheduling.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::diagnostics;
use crate::error::{Error, Result};
use crate::kubo::{KuboData, DEFAULT_KDE_SCALE};
use crate::measure::Bins;
use crate::model::{
    derived_seed, hopping_velocity, position_operator, realize, velocity_operator, Boundary,
    DisorderSpec, HamiltonianRealization, LatticeSpec, SiteOperator, DEFAULT_MAX_SITES,
};
use crate::response::{in_phase_current, FieldProfile};
use crate::spectral::{diagonalize, dos_measure, fermi, EigenSystem, FermiParams};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Dos,
    Phi,
    Sigma,
    Current,
    DiagDecay,
    DiagYnorm,
    DiagMott,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Dos => "dos",
            Task::Phi => "phi",
            Task::Sigma => "sigma",
            Task::Current => "current",
            Task::DiagDecay => "diag-decay",
            Task::DiagYnorm => "diag-ynorm",
            Task::DiagMott => "diag-mott",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub mu_grid: Vec<f64>,
    #[serde(default, rename = "T_grid")]
    pub t_grid: Vec<f64>,
    /// Frequency windows `[a, b]` whose `Γ` mass is tracked across the sweep.
    #[serde(default = "default_selected_bins")]
    pub selected_bins: Vec<[f64; 2]>,
}

fn default_selected_bins() -> Vec<[f64; 2]> {
    vec![[0.5, 1.0]]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinningSpec {
    /// Number of frequency bins (even, mirrored about zero).
    pub count: usize,
    /// Half-width of the frequency grid; the a-priori spectral width if absent.
    pub half_width: Option<f64>,
    /// Number of energy bins over the a-priori spectrum.
    pub energy_count: usize,
}

impl Default for BinningSpec {
    fn default() -> Self {
        BinningSpec {
            count: 400,
            half_width: None,
            energy_count: 400,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
}

impl Default for TimeGrid {
    fn default() -> Self {
        TimeGrid {
            start: 0.0,
            stop: 20.0,
            count: 201,
        }
    }
}

impl TimeGrid {
    pub fn points(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.start];
        }
        crate::response::uniform_grid(self.start, self.stop, self.count)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagSpec {
    /// Fermi-energy interval of the decay diagnostic.
    pub mu_interval: [f64; 2],
    pub mu_grid_count: usize,
    /// Box sizes of the `‖X₁ f(H) δ₀‖²` growth table.
    #[serde(rename = "L_list")]
    pub l_list: Vec<usize>,
    /// Frequencies of the Mott probe, inside `]0, 1[`.
    pub nu_grid: Vec<f64>,
}

impl Default for DiagSpec {
    fn default() -> Self {
        DiagSpec {
            mu_interval: [-0.25, 0.25],
            mu_grid_count: 21,
            l_list: vec![64, 128, 256, 512],
            nu_grid: (1..=10).map(|k| 0.05 * k as f64).collect(),
        }
    }
}

/// Everything that determines a run. Serialized canonically for provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub lattice: LatticeSpec,
    pub disorder: DisorderSpec,
    #[serde(default = "default_fermi")]
    pub fermi: FermiParams,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default = "default_realizations")]
    pub realizations: u64,
    #[serde(default)]
    pub binning: BinningSpec,
    #[serde(default = "default_task")]
    pub task: Task,
    #[serde(default)]
    pub field: FieldProfile,
    #[serde(default)]
    pub times: TimeGrid,
    #[serde(default)]
    pub diag: DiagSpec,
    #[serde(default = "default_kde_scale")]
    pub kde_scale: f64,
    #[serde(default = "default_max_sites")]
    pub max_sites: usize,
    /// Run directory. Not part of the provenance hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

fn default_fermi() -> FermiParams {
    FermiParams {
        mu: 0.0,
        temperature: 0.0,
    }
}
fn default_realizations() -> u64 {
    1
}
fn default_task() -> Task {
    Task::Sigma
}
fn default_kde_scale() -> f64 {
    DEFAULT_KDE_SCALE
}
fn default_max_sites() -> usize {
    DEFAULT_MAX_SITES
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lattice: LatticeSpec {
                d: 1,
                side: 64,
                boundary: Boundary::Dirichlet,
            },
            disorder: DisorderSpec::uniform(2.0, 1.0, 0),
            fermi: default_fermi(),
            sweep: None,
            realizations: 1,
            binning: BinningSpec::default(),
            task: Task::Sigma,
            field: FieldProfile::default(),
            times: TimeGrid::default(),
            diag: DiagSpec::default(),
            kde_scale: DEFAULT_KDE_SCALE,
            max_sites: DEFAULT_MAX_SITES,
            out: None,
        }
    }
}

fn strictly_monotone(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] > w[0]) || xs.windows(2).all(|w| w[1] < w[0])
}

impl RunConfig {
    /// Parses JSON, reporting the path of the first offending field.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: RunConfig = serde_path_to_error::deserialize(value)
            .map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `a.b.c=value` overrides and re-validates. Values are parsed as
    /// JSON when possible and taken as strings otherwise.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut value = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        RunConfig::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        self.lattice.validate()?;
        self.disorder.validate()?;
        self.fermi
            .validate()
            .map_err(|e| Error::config("fermi", e.to_string()))?;
        if self.realizations == 0 {
            return Err(Error::config("realizations", "at least one realization is required"));
        }
        if self.binning.count == 0 || self.binning.count % 2 == 1 {
            return Err(Error::config("binning.count", "bin count must be even and positive"));
        }
        if self.binning.energy_count == 0 {
            return Err(Error::config("binning.energy_count", "bin count must be positive"));
        }
        if let Some(h) = self.binning.half_width {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::config("binning.half_width", "half width must be positive"));
            }
        }
        if let Some(s) = &self.sweep {
            if s.mu_grid.is_empty() && s.t_grid.is_empty() {
                return Err(Error::config("sweep", "sweep needs a non-empty mu_grid or T_grid"));
            }
            if !strictly_monotone(&s.mu_grid) {
                return Err(Error::config("sweep.mu_grid", "grid must be sorted without repeats"));
            }
            if !strictly_monotone(&s.t_grid) {
                return Err(Error::config("sweep.T_grid", "grid must be sorted without repeats"));
            }
            if s.t_grid.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
                return Err(Error::config("sweep.T_grid", "temperatures must be finite and >= 0"));
            }
            if s.selected_bins.iter().any(|[a, b]| !(a < b)) {
                return Err(Error::config("sweep.selected_bins", "each window needs a < b"));
            }
        }
        if self.times.count == 0 {
            return Err(Error::config("times.count", "time grid needs at least one point"));
        }
        self.field
            .validate()
            .map_err(|e| Error::config("field", e.to_string()))?;
        let d = &self.diag;
        if !(d.mu_interval[0] <= d.mu_interval[1]) || d.mu_grid_count == 0 {
            return Err(Error::config("diag.mu_interval", "need lo <= hi and a positive grid count"));
        }
        if d.l_list.is_empty() || !d.l_list.windows(2).all(|w| w[1] > w[0]) {
            return Err(Error::config("diag.L_list", "box sizes must be non-empty and increasing"));
        }
        if d.nu_grid.iter().any(|&v| !(v > 0.0 && v < 1.0)) || !strictly_monotone(&d.nu_grid) {
            return Err(Error::config("diag.nu_grid", "frequencies must be sorted inside ]0, 1["));
        }
        if !(self.kde_scale > 0.0 && self.kde_scale.is_finite()) {
            return Err(Error::config("kde_scale", "must be positive"));
        }
        if self.lattice.sites() > self.max_sites {
            return Err(Error::config(
                "lattice.L",
                format!("{} sites exceed max_sites = {}", self.lattice.sites(), self.max_sites),
            ));
        }
        Ok(())
    }

    /// Canonical JSON (sorted keys, no run directory).
    pub fn canonical_json(&self) -> Result<String> {
        let mut cfg = self.clone();
        cfg.out = None;
        Ok(serde_json::to_string_pretty(&serde_json::to_value(&cfg)?)? + "\n")
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }

    pub fn frequency_bins(&self) -> Result<Bins> {
        let half = match self.binning.half_width {
            Some(h) => h,
            None => {
                let (lo, hi) = self.disorder.spectrum_bounds(&self.lattice);
                hi - lo
            }
        };
        Bins::symmetric(half, self.binning.count)
    }

    pub fn energy_bins(&self) -> Result<Bins> {
        let (lo, hi) = self.disorder.spectrum_bounds(&self.lattice);
        let pad = 1e-9 * (hi - lo);
        Bins::new(lo - pad, hi + pad, self.binning.energy_count)
    }

    /// `(μ, T)` points of the sweep, μ-major.
    pub fn sweep_points(&self) -> Vec<FermiParams> {
        let Some(s) = &self.sweep else {
            return Vec::new();
        };
        let mus = if s.mu_grid.is_empty() { vec![self.fermi.mu] } else { s.mu_grid.clone() };
        let ts = if s.t_grid.is_empty() {
            vec![self.fermi.temperature]
        } else {
            s.t_grid.clone()
        };
        mus.iter()
            .flat_map(|&mu| ts.iter().map(move |&t| FermiParams { mu, temperature: t }))
            .collect()
    }
}

fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key.path=value"))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(Error::config(spec, "empty override path"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::config(keys[..i].join("."), "cannot descend into a non-object value")
        })?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

/// One realization of the run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkUnit {
    pub realization_index: u64,
    pub seed: u64,
}

pub fn plan(config: &RunConfig) -> Result<Vec<WorkUnit>> {
    config.validate()?;
    Ok((0..config.realizations)
        .map(|i| WorkUnit {
            realization_index: i,
            seed: derived_seed(config.disorder.master_seed, i),
        })
        .collect())
}

/// Named per-realization numbers: scalars and fixed-length series.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Observables {
    pub scalars: BTreeMap<String, f64>,
    pub series: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitResult {
    pub realization_index: u64,
    pub seed: u64,
    pub observables: Observables,
    /// One entry per sweep point, in [`RunConfig::sweep_points`] order.
    #[serde(default)]
    pub sweep: Vec<Observables>,
}

/// Streaming mean and sum of squared deviations, per component.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accumulator {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl Accumulator {
    pub fn new(len: usize) -> Self {
        Accumulator {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.mean.len() {
            return Err(Error::Input(format!(
                "sample of length {} pushed into an accumulator of length {}",
                x.len(),
                self.mean.len()
            )));
        }
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
        Ok(())
    }

    /// Pairwise merge: equals accumulating the concatenated samples.
    pub fn merge(&self, other: &Accumulator) -> Result<Accumulator> {
        if self.mean.len() != other.mean.len() {
            return Err(Error::Input("merging accumulators of different lengths".into()));
        }
        if self.count == 0 {
            return Ok(other.clone());
        }
        if other.count == 0 {
            return Ok(self.clone());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let mut out = Accumulator::new(self.mean.len());
        out.count = self.count + other.count;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            out.mean[i] = self.mean[i] + delta * nb / n;
            out.m2[i] = self.m2[i] + other.m2[i] + delta * delta * na * nb / n;
        }
        Ok(out)
    }

    /// `sqrt(M2 / (n (n - 1)))`; undefined for a single sample.
    pub fn stderr(&self) -> Vec<Option<f64>> {
        let n = self.count as f64;
        self.m2
            .iter()
            .map(|&s| (self.count > 1).then(|| (s.max(0.0) / (n * (n - 1.0))).sqrt()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarEstimate {
    pub mean: f64,
    pub stderr: Option<f64>,
}

impl ScalarEstimate {
    /// Standard error, with an undefined one read as zero.
    pub fn err(&self) -> f64 {
        self.stderr.unwrap_or(0.0)
    }
}

/// Mean and standard error of a series on its axis. For binned series
/// `x_lo`/`x_hi` are the bin edges; for point grids they coincide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesEstimate {
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    pub scalars: BTreeMap<String, ScalarEstimate>,
    pub series: BTreeMap<String, SeriesEstimate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEstimate {
    pub mu: f64,
    #[serde(rename = "T")]
    pub temperature: f64,
    pub estimates: Estimates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateMeta {
    pub config_hash: String,
    pub master_seed: u64,
    pub artifact_version: String,
    pub task: Task,
    pub n_realizations: u64,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEstimate {
    pub meta: EstimateMeta,
    pub estimates: Estimates,
    #[serde(default)]
    pub sweep: Vec<SweepEstimate>,
    /// Task-specific post-processing (e.g. the decay fit).
    #[serde(default)]
    pub extra: Value,
}

impl EnsembleEstimate {
    pub fn scalar(&self, name: &str) -> Option<&ScalarEstimate> {
        self.estimates.scalars.get(name)
    }

    pub fn series(&self, name: &str) -> Option<&SeriesEstimate> {
        self.estimates.series.get(name)
    }
}

#[derive(Clone, Copy, Debug)]
struct Axis<'a> {
    lo: &'a [f64],
    hi: &'a [f64],
}

#[derive(Default)]
struct ObservableAccumulator {
    scalars: BTreeMap<String, Accumulator>,
    series: BTreeMap<String, Accumulator>,
}

impl ObservableAccumulator {
    fn push(&mut self, obs: &Observables) -> Result<()> {
        for (k, &v) in &obs.scalars {
            self.scalars
                .entry(k.clone())
                .or_insert_with(|| Accumulator::new(1))
                .push(&[v])?;
        }
        for (k, v) in &obs.series {
            self.series
                .entry(k.clone())
                .or_insert_with(|| Accumulator::new(v.len()))
                .push(v)?;
        }
        Ok(())
    }

    fn finish(&self, axes: &BTreeMap<String, (Vec<f64>, Vec<f64>)>) -> Estimates {
        let scalars = self
            .scalars
            .iter()
            .map(|(k, a)| {
                (
                    k.clone(),
                    ScalarEstimate {
                        mean: a.mean[0],
                        stderr: a.stderr()[0],
                    },
                )
            })
            .collect();
        let series = self
            .series
            .iter()
            .map(|(k, a)| {
                let n = a.mean.len();
                let (lo, hi) = axes
                    .get(k)
                    .filter(|(lo, _)| lo.len() == n)
                    .map(|(lo, hi)| Axis { lo, hi })
                    .map(|ax| (ax.lo.to_vec(), ax.hi.to_vec()))
                    .unwrap_or_else(|| {
                        let idx: Vec<f64> = (0..n).map(|i| i as f64).collect();
                        (idx.clone(), idx)
                    });
                (
                    k.clone(),
                    SeriesEstimate {
                        x_lo: lo,
                        x_hi: hi,
                        mean: a.mean.clone(),
                        stderr: a.stderr(),
                    },
                )
            })
            .collect();
        Estimates { scalars, series }
    }
}

fn bin_axis(b: &Bins) -> (Vec<f64>, Vec<f64>) {
    ((0..b.count).map(|i| b.left(i)).collect(), (0..b.count).map(|i| b.right(i)).collect())
}

fn point_axis(xs: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    (xs.clone(), xs)
}

fn series_axes(cfg: &RunConfig) -> Result<BTreeMap<String, (Vec<f64>, Vec<f64>)>> {
    let freq = bin_axis(&cfg.frequency_bins()?);
    let energy = bin_axis(&cfg.energy_bins()?);
    let mut axes = BTreeMap::new();
    axes.insert("sigma".to_string(), freq.clone());
    axes.insert("phi_frequency".to_string(), freq);
    axes.insert("dos_density".to_string(), energy.clone());
    axes.insert("psi_density".to_string(), energy.clone());
    axes.insert("phi_energy".to_string(), energy);
    axes.insert("current".to_string(), point_axis(cfg.times.points()));
    let radius = diagnostics::decay_radius(&cfg.lattice);
    axes.insert("decay".to_string(), point_axis((0..=radius).map(|r| r as f64).collect()));
    axes.insert(
        "ynorm".to_string(),
        point_axis(cfg.diag.l_list.iter().map(|&l| l as f64).collect()),
    );
    axes.insert("mott_mass".to_string(), point_axis(cfg.diag.nu_grid.clone()));
    Ok(axes)
}

/// Velocity operator of a realization: `i[H, X₁]` on Dirichlet boxes, the
/// bare hopping current on periodic ones.
pub fn velocity_for(h: &HamiltonianRealization) -> Result<SiteOperator> {
    match h.lattice.boundary {
        Boundary::Periodic => Ok(hopping_velocity(&h.lattice)),
        Boundary::Dirichlet => velocity_operator(h, &position_operator(&h.lattice)),
    }
}

fn sigma_observables(
    data: &KuboData,
    p: FermiParams,
    freq: &Bins,
    windows: &[[f64; 2]],
) -> Result<Observables> {
    let gamma = data.gamma(p);
    let atom = data.atom(p)?;
    let gamma_mass = gamma.point_mass();
    let mut obs = Observables::default();
    obs.scalars.insert("atom".into(), atom);
    obs.scalars.insert("gamma_mass".into(), gamma_mass);
    obs.scalars.insert("total_mass".into(), atom + gamma_mass);
    for [a, b] in windows {
        obs.scalars.insert(format!("gamma[{a},{b}]"), gamma.mass_in(*a, *b));
    }
    obs.series.insert("sigma".into(), gamma.bin(freq));
    Ok(obs)
}

fn densities(mass: Vec<f64>, bins: &Bins) -> Vec<f64> {
    let w = bins.width();
    mass.into_iter().map(|m| m / w).collect()
}

/// Computes one work unit. Pure in `(config, unit)`.
pub fn compute_unit(cfg: &RunConfig, unit: WorkUnit) -> Result<UnitResult> {
    let index = unit.realization_index;
    let mut obs = Observables::default();
    let mut sweep = Vec::new();

    if cfg.task == Task::DiagYnorm {
        let values = cfg
            .diag
            .l_list
            .iter()
            .map(|&side| {
                let lattice = LatticeSpec {
                    side,
                    ..cfg.lattice.clone()
                };
                let h = realize(&lattice, &cfg.disorder, index, cfg.max_sites)?;
                let eig = diagonalize(&h)?;
                diagnostics::y_norm(&lattice, &eig, cfg.fermi)
            })
            .collect::<Result<Vec<f64>>>()?;
        obs.series.insert("ynorm".into(), values);
        return Ok(UnitResult {
            realization_index: index,
            seed: unit.seed,
            observables: obs,
            sweep,
        });
    }

    let h = realize(&cfg.lattice, &cfg.disorder, index, cfg.max_sites)?;
    let eig = diagonalize(&h)?;
    let freq = cfg.frequency_bins()?;
    let energy = cfg.energy_bins()?;
    let needs_kubo = !matches!(cfg.task, Task::Dos | Task::DiagDecay) || cfg.sweep.is_some();
    let data = if needs_kubo {
        Some(KuboData::new(&eig, &velocity_for(&h)?, cfg.kde_scale)?)
    } else {
        None
    };
    let windows = cfg
        .sweep
        .as_ref()
        .map(|s| s.selected_bins.clone())
        .unwrap_or_default();

    match cfg.task {
        Task::Dos => {
            let dos = dos_measure(&eig);
            obs.scalars.insert("dos_total_mass".into(), dos.total_mass());
            obs.series.insert("dos_density".into(), densities(dos.bin(&energy), &energy));
        }
        Task::Phi => {
            let data = data.as_ref().expect("kubo data");
            let dos = dos_measure(&eig);
            obs.scalars.insert("phi_total_mass".into(), data.phi.total_mass());
            obs.scalars.insert("psi_total_mass".into(), data.psi.total_mass());
            obs.scalars.insert("dos_total_mass".into(), dos.total_mass());
            obs.series.insert("dos_density".into(), densities(dos.bin(&energy), &energy));
            obs.series.insert("psi_density".into(), densities(data.psi.bin(&energy), &energy));
            obs.series
                .insert("phi_energy".into(), densities(data.phi.marginal(&energy, true), &energy));
            let mut by_freq = vec![0.0; freq.count];
            for e in &data.phi.entries {
                if let Some(i) = freq.index_of(e.lambda1 - e.lambda2) {
                    by_freq[i] += e.weight;
                }
            }
            obs.series.insert("phi_frequency".into(), by_freq);
        }
        Task::Sigma => {
            obs = sigma_observables(data.as_ref().expect("kubo data"), cfg.fermi, &freq, &windows)?;
        }
        Task::Current => {
            let sigma = data.as_ref().expect("kubo data").sigma(cfg.fermi)?;
            let trace = in_phase_current(&sigma, &cfg.field, &cfg.times.points())?;
            obs.scalars.insert("max_imag_residual".into(), trace.max_imag_residual());
            obs.scalars.insert("total_mass".into(), sigma.total_mass());
            obs.series.insert("current".into(), trace.values);
        }
        Task::DiagDecay => {
            let mus = diagnostics::mu_grid(cfg.diag.mu_interval, cfg.diag.mu_grid_count);
            obs.series
                .insert("decay".into(), diagnostics::decay_values(&cfg.lattice, &eig, &mus));
        }
        Task::DiagMott => {
            let sigma = data.as_ref().expect("kubo data").sigma(cfg.fermi)?;
            let masses = cfg.diag.nu_grid.iter().map(|&nu| sigma.mass_in(0.0, nu)).collect();
            obs.series.insert("mott_mass".into(), masses);
        }
        Task::DiagYnorm => unreachable!(),
    }

    if let Some(data) = &data {
        for p in cfg.sweep_points() {
            sweep.push(sigma_observables(data, p, &freq, &windows)?);
        }
    }
    Ok(UnitResult {
        realization_index: index,
        seed: unit.seed,
        observables: obs,
        sweep,
    })
}

/// Folds unit results in realization-index order.
pub fn reduce(cfg: &RunConfig, units: &[UnitResult]) -> Result<EnsembleEstimate> {
    let mut sorted: Vec<&UnitResult> = units.iter().collect();
    sorted.sort_by_key(|u| u.realization_index);
    let points = cfg.sweep_points();
    let mut main = ObservableAccumulator::default();
    let mut per_point: Vec<ObservableAccumulator> =
        (0..points.len()).map(|_| ObservableAccumulator::default()).collect();
    for u in &sorted {
        main.push(&u.observables)?;
        if u.sweep.len() != points.len() {
            return Err(Error::Input(format!(
                "unit {} has {} sweep entries, expected {}",
                u.realization_index,
                u.sweep.len(),
                points.len()
            )));
        }
        for (acc, obs) in per_point.iter_mut().zip(&u.sweep) {
            acc.push(obs)?;
        }
    }
    let axes = series_axes(cfg)?;
    let sweep = points
        .iter()
        .zip(&per_point)
        .map(|(p, acc)| SweepEstimate {
            mu: p.mu,
            temperature: p.temperature,
            estimates: acc.finish(&axes),
        })
        .collect();
    let mut estimate = EnsembleEstimate {
        meta: EstimateMeta {
            config_hash: cfg.hash()?,
            master_seed: cfg.disorder.master_seed,
            artifact_version: ARTIFACT_VERSION.to_string(),
            task: cfg.task,
            n_realizations: sorted.len() as u64,
            seeds: sorted.iter().map(|u| u.seed).collect(),
        },
        estimates: main.finish(&axes),
        sweep,
        extra: Value::Null,
    };
    if cfg.task == Task::DiagDecay {
        if let Some(s) = estimate.series("decay") {
            let fit = diagnostics::fit_decay(&s.mean, diagnostics::decay_radius(&cfg.lattice));
            estimate.extra = serde_json::json!({ "fit": fit });
        }
    }
    Ok(estimate)
}

/// Execution options that do not affect results.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker cap; `None` lets the pool decide.
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
}

/// Maps `f` over `items` on up to `threads` workers, preserving order.
pub fn parallel_map<T, R, F>(threads: Option<usize>, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if threads == Some(1) {
            return Ok(items.iter().map(f).collect());
        }
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n);
        }
        let pool = builder
            .build()
            .map_err(|e| Error::Input(format!("cannot start worker pool: {e}")))?;
        Ok(pool.install(|| items.par_iter().map(f).collect()))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        Ok(items.iter().map(f).collect())
    }
}

fn unit_path(dir: &Path, index: u64) -> PathBuf {
    dir.join("units").join(format!("{index:04}.json"))
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn to_sorted_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(&serde_json::to_value(value)?)? + "\n")
}

fn prepare_dir(cfg: &RunConfig, dir: &Path, resume: bool) -> Result<()> {
    let canonical = cfg.canonical_json()?;
    let config_path = dir.join("config.json");
    let non_empty = dir.exists() && fs::read_dir(dir)?.next().is_some();
    if non_empty {
        if !resume {
            return Err(Error::Input(format!(
                "run directory {} is not empty; pass --resume to continue it",
                dir.display()
            )));
        }
        let existing = fs::read_to_string(&config_path).map_err(|e| {
            Error::Input(format!("cannot resume {}: {e}", dir.display()))
        })?;
        if existing != canonical {
            return Err(Error::Input(format!(
                "run directory {} was created with a different configuration",
                dir.display()
            )));
        }
    } else {
        fs::create_dir_all(dir)?;
        write_atomic(&config_path, &canonical)?;
    }
    fs::create_dir_all(dir.join("units"))?;
    Ok(())
}

/// Runs the ensemble; with a run directory, units are checkpointed as they
/// finish and results are written at the end.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<EnsembleEstimate> {
    let units = plan(cfg)?;
    let dir = opts.out_dir.clone().or_else(|| cfg.out.clone());
    if let Some(dir) = &dir {
        prepare_dir(cfg, dir, opts.resume)?;
    }
    let outcomes = parallel_map(opts.threads, &units, |&unit| -> Result<UnitResult> {
        if let Some(dir) = &dir {
            let path = unit_path(dir, unit.realization_index);
            if path.exists() {
                let r: UnitResult = serde_json::from_str(&fs::read_to_string(&path)?)?;
                return Ok(r);
            }
            let r = compute_unit(cfg, unit)?;
            write_atomic(&path, &to_sorted_json(&r)?)?;
            Ok(r)
        } else {
            compute_unit(cfg, unit)
        }
    })?;
    let mut done = Vec::with_capacity(units.len());
    let mut failed = Vec::new();
    let mut first = None;
    for (unit, outcome) in units.iter().zip(outcomes) {
        match outcome {
            Ok(r) => done.push(r),
            Err(e) => {
                failed.push(unit.realization_index);
                first.get_or_insert_with(|| e.to_string());
            }
        }
    }
    if !failed.is_empty() {
        return Err(Error::Partial {
            failed,
            first: first.unwrap_or_default(),
        });
    }
    let estimate = reduce(cfg, &done)?;
    if let Some(dir) = &dir {
        write_results(dir, &estimate)?;
    }
    Ok(estimate)
}

/// Writes `result.json`, `result.csv` and, for sweeps, `sweep.csv`.
pub fn write_results(dir: &Path, estimate: &EnsembleEstimate) -> Result<()> {
    write_atomic(&dir.join("result.json"), &to_sorted_json(estimate)?)?;
    let mut buf = Vec::new();
    write_estimate_csv(&mut buf, &estimate.estimates)?;
    fs::write(dir.join("result.csv"), buf)?;
    if !estimate.sweep.is_empty() {
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &estimate.sweep)?;
        fs::write(dir.join("sweep.csv"), buf)?;
    }
    Ok(())
}

/// Shortest round-trip form, with exponent notation for tiny and huge
/// magnitudes.
fn num(x: f64) -> String {
    format!("{x:?}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Long-format table: one row per scalar and per series point.
pub fn write_estimate_csv<W: Write>(out: W, est: &Estimates) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(["quantity", "x_lo", "x_hi", "mean", "stderr"])?;
    for (k, s) in &est.scalars {
        w.write_record([k.as_str(), "", "", &num(s.mean), &opt(s.stderr)])?;
    }
    for (k, s) in &est.series {
        for i in 0..s.mean.len() {
            w.write_record([
                k.clone(),
                num(s.x_lo[i]),
                num(s.x_hi[i]),
                num(s.mean[i]),
                opt(s.stderr[i]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(out: W, sweep: &[SweepEstimate]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(["mu", "T", "quantity", "mean", "stderr"])?;
    for p in sweep {
        for (k, s) in &p.estimates.scalars {
            w.write_record([
                num(p.mu),
                num(p.temperature),
                k.clone(),
                num(s.mean),
                opt(s.stderr),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    #[serde(rename = "L")]
    pub side: usize,
    /// `(1/N) tr f(H)` over the box.
    pub volume_trace: f64,
    /// Mean over sites of `<δ_x, f(H) δ_x>`.
    pub site_average: f64,
    pub gap: f64,
    /// `<δ₀, f(H) δ₀>` at the center site.
    pub center_value: f64,
    /// Infinite-volume value for `λ = 0`.
    pub fourier_value: Option<f64>,
}

/// Center-site value against the volume-averaged trace of `f_μ^T(H)` for
/// each box size, realization 0 of the configured disorder.
pub fn trace_per_unit_volume_convergence(
    cfg: &RunConfig,
    sides: &[usize],
) -> Result<Vec<TraceRow>> {
    let p = cfg.fermi;
    let fourier = (cfg.disorder.lambda == 0.0)
        .then(|| diagnostics::free_trace_value(cfg.lattice.d, |e| fermi(e, p)));
    sides
        .iter()
        .map(|&side| {
            let lattice = LatticeSpec {
                side,
                ..cfg.lattice.clone()
            };
            let h = realize(&lattice, &cfg.disorder, 0, cfg.max_sites)?;
            let eig: EigenSystem = diagonalize(&h)?;
            let fh = crate::spectral::function_of_h_matrix(&eig, |e| fermi(e, p));
            let n = lattice.sites();
            let diag: Vec<f64> = (0..n).map(|x| fh[(x, x)]).collect();
            let mut trace = 0.0;
            for x in 0..n {
                trace += fh[(x, x)];
            }
            let volume_trace = trace / n as f64;
            let site_average = diag.iter().sum::<f64>() / n as f64;
            Ok(TraceRow {
                side,
                volume_trace,
                site_average,
                gap: (volume_trace - site_average).abs(),
                center_value: diag[lattice.center()],
                fourier_value: fourier,
            })
        })
        .collect()
}
