//! State-space model parameters, delay traces, and a trace simulator.
//!
//! The generating law is
//!
//! ```text
//! χ(t) = b·χ(t−1) + η(t),   η ~ (0, C_η)
//! y(t) = χ(t) + ν(t) + ε(t), ν ~ (0, C_ν), ε ~ (0, σ² I)
//! ```
//!
//! with `C_ν = γ G` in the usual topology-driven configuration. All values
//! are in milliseconds (covariances in ms²).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_psd, psd_factor};
use crate::topology::Gramian;

/// Relative eigenvalue tolerance for parameter covariances.
pub const PARAM_PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub c_nu: DMatrix<f64>,
    pub c_eta: DMatrix<f64>,
    pub sigma2: f64,
    pub damping_b: f64,
    pub gamma: f64,
}

impl ModelParams {
    pub fn new(c_nu: DMatrix<f64>, c_eta: DMatrix<f64>, sigma2: f64, damping_b: f64, gamma: f64) -> Result<Self> {
        let params = Self {
            c_nu,
            c_eta,
            sigma2,
            damping_b,
            gamma,
        };
        params.validate()?;
        Ok(params)
    }

    /// `C_ν = γ G`.
    pub fn from_gramian(gamma: f64, gramian: &Gramian, c_eta: DMatrix<f64>, sigma2: f64, damping_b: f64) -> Result<Self> {
        Self::new(build_c_nu(gamma, gramian)?, c_eta, sigma2, damping_b, gamma)
    }

    pub fn dim(&self) -> usize {
        self.c_nu.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.c_nu.nrows();
        if p == 0 {
            return Err(Error::Dimension("model has zero paths".into()));
        }
        if self.c_nu.shape() != (p, p) || self.c_eta.shape() != (p, p) {
            return Err(Error::Dimension(format!(
                "c_nu is {:?}, c_eta is {:?}; both must be {p}x{p}",
                self.c_nu.shape(),
                self.c_eta.shape()
            )));
        }
        check_psd(&self.c_nu, PARAM_PSD_TOL, "c_nu")?;
        check_psd(&self.c_eta, PARAM_PSD_TOL, "c_eta")?;
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma2 must be >= 0, got {}", self.sigma2)));
        }
        if !(self.damping_b > 0.0 && self.damping_b <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "damping b must lie in (0, 1], got {}",
                self.damping_b
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }

    /// `C_η + C_ν`, the part of the one-step prior that does not depend on `M`.
    pub fn noise_sum(&self) -> DMatrix<f64> {
        &self.c_eta + &self.c_nu
    }

    pub fn to_file(&self, gramian: Option<&Gramian>) -> ParamsFile {
        let p = self.dim();
        let c_eta = if self.c_eta == DMatrix::identity(p, p) * self.c_eta[(0, 0)] {
            MatrixSpec::Scalar(self.c_eta[(0, 0)])
        } else {
            MatrixSpec::Dense(rows_of(&self.c_eta))
        };
        let c_nu = match gramian {
            Some(g) if g.dim() == p && g.to_f64() * self.gamma == self.c_nu => None,
            _ => Some(MatrixSpec::Dense(rows_of(&self.c_nu))),
        };
        ParamsFile {
            gamma: self.gamma,
            sigma2: self.sigma2,
            b: self.damping_b,
            c_eta,
            c_nu,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, gramian: Option<&Gramian>) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file(gramian))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, gramian: &Gramian) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: ParamsFile = serde_json::from_str(&text)?;
        file.into_params(gramian)
    }
}

/// `γ · G`.
pub fn build_c_nu(gamma: f64, gramian: &Gramian) -> Result<DMatrix<f64>> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(gramian.to_f64() * gamma)
}

/// A covariance given either as a dense matrix or as `c · I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Dense(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn to_matrix(&self, p: usize, name: &str) -> Result<DMatrix<f64>> {
        match self {
            MatrixSpec::Scalar(c) => Ok(DMatrix::identity(p, p) * *c),
            MatrixSpec::Dense(rows) => {
                if rows.len() != p || rows.iter().any(|r| r.len() != p) {
                    return Err(Error::Dimension(format!("`{name}` must be {p}x{p}")));
                }
                Ok(DMatrix::from_fn(p, p, |i, j| rows[i][j]))
            }
        }
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// On-disk model parameters. `c_nu` is omitted when it equals `γ G`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub gamma: f64,
    pub sigma2: f64,
    #[serde(default = "default_b")]
    pub b: f64,
    pub c_eta: MatrixSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_nu: Option<MatrixSpec>,
}

fn default_b() -> f64 {
    1.0
}

impl ParamsFile {
    pub fn into_params(self, gramian: &Gramian) -> Result<ModelParams> {
        let p = gramian.dim();
        let c_nu = match &self.c_nu {
            Some(spec) => spec.to_matrix(p, "c_nu")?,
            None => build_c_nu(self.gamma, gramian)?,
        };
        let c_eta = self.c_eta.to_matrix(p, "c_eta")?;
        ModelParams::new(c_nu, c_eta, self.sigma2, self.b, self.gamma)
    }
}

/// Time-indexed delays for every path plus the per-slot measured subset.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayTrace {
    values: DMatrix<f64>,
    selection: Vec<Vec<usize>>,
    timestamps: Vec<i64>,
}

impl DelayTrace {
    /// `values` is `T × P`. Each selection is sorted and deduplicated.
    pub fn new(values: DMatrix<f64>, selection: Vec<Vec<usize>>, timestamps: Vec<i64>) -> Result<Self> {
        let (t, p) = values.shape();
        if t == 0 || p == 0 {
            return Err(Error::Trace("trace must have at least one slot and one path".into()));
        }
        if selection.len() != t || timestamps.len() != t {
            return Err(Error::Trace(format!(
                "{t} slots but {} selections and {} timestamps",
                selection.len(),
                timestamps.len()
            )));
        }
        let selection = selection
            .into_iter()
            .enumerate()
            .map(|(slot, mut s)| {
                s.sort_unstable();
                s.dedup();
                match s.last() {
                    Some(&last) if last >= p => Err(Error::Trace(format!(
                        "slot {slot}: path {last} out of range for {p} paths"
                    ))),
                    _ => Ok(s),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Trace("non-finite delay value".into()));
        }
        Ok(Self {
            values,
            selection,
            timestamps,
        })
    }

    pub fn horizon(&self) -> usize {
        self.values.nrows()
    }

    pub fn path_count(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn delays(&self, slot: usize) -> DVector<f64> {
        self.values.row(slot).transpose()
    }

    pub fn selection(&self, slot: usize) -> &[usize] {
        &self.selection[slot]
    }

    pub fn selections(&self) -> &[Vec<usize>] {
        &self.selection
    }

    /// `(path, value)` pairs for the measured paths of `slot`.
    pub fn measurements(&self, slot: usize) -> Vec<(usize, f64)> {
        self.selection[slot].iter().map(|&p| (p, self.values[(slot, p)])).collect()
    }

    /// Measured values in selection order.
    pub fn measured_values(&self, slot: usize) -> DVector<f64> {
        DVector::from_iterator(
            self.selection[slot].len(),
            self.selection[slot].iter().map(|&p| self.values[(slot, p)]),
        )
    }

    pub fn with_selection(&self, selection: Vec<Vec<usize>>) -> Result<Self> {
        Self::new(self.values.clone(), selection, self.timestamps.clone())
    }

    /// Slots `range` as a new trace.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.horizon() || len == 0 {
            return Err(Error::Trace(format!(
                "window {start}..{} outside 0..{}",
                start + len,
                self.horizon()
            )));
        }
        Self::new(
            self.values.rows(start, len).into_owned(),
            self.selection[start..start + len].to_vec(),
            self.timestamps[start..start + len].to_vec(),
        )
    }

    /// Writes `t,path_id,value,measured`, one row per (slot, path).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for slot in 0..self.horizon() {
            let mut measured = vec![false; self.path_count()];
            for &p in &self.selection[slot] {
                measured[p] = true;
            }
            for p in 0..self.path_count() {
                w.serialize(TraceRow {
                    t: self.timestamps[slot],
                    path_id: p,
                    value: self.values[(slot, p)],
                    measured: u8::from(measured[p]),
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["t", "path_id", "value", "measured"] {
            return Err(Error::Trace(format!(
                "expected header t,path_id,value,measured, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut order: Vec<i64> = Vec::new();
        let mut slots: BTreeMap<i64, BTreeMap<usize, (f64, bool)>> = BTreeMap::new();
        for (line, row) in r.deserialize::<TraceRow>().enumerate() {
            let row = row?;
            if row.measured > 1 {
                return Err(Error::Trace(format!("row {}: measured must be 0 or 1", line + 2)));
            }
            let entry = slots.entry(row.t).or_insert_with(|| {
                order.push(row.t);
                BTreeMap::new()
            });
            if entry.insert(row.path_id, (row.value, row.measured == 1)).is_some() {
                return Err(Error::Trace(format!(
                    "row {}: duplicate (t={}, path_id={})",
                    line + 2,
                    row.t,
                    row.path_id
                )));
            }
        }
        if order.is_empty() {
            return Err(Error::Trace("trace file has no rows".into()));
        }
        let p = slots[&order[0]].len();
        let mut values = DMatrix::zeros(order.len(), p);
        let mut selection = Vec::with_capacity(order.len());
        for (slot, t) in order.iter().enumerate() {
            let rows = &slots[t];
            if rows.len() != p || rows.keys().next_back() != Some(&(p - 1)) {
                return Err(Error::Trace(format!("slot t={t} does not list paths 0..{}", p - 1)));
            }
            let mut sel = Vec::new();
            for (&path, &(value, measured)) in rows {
                values[(slot, path)] = value;
                if measured {
                    sel.push(path);
                }
            }
            selection.push(sel);
        }
        Self::new(values, selection, order)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    t: i64,
    path_id: usize,
    value: f64,
    measured: u8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseKind {
    Gaussian,
    /// Student-t scaled to the same covariance. Requires `dof > 2`.
    StudentT { dof: f64 },
}

/// Per-slot rule for which paths get measured in a simulated trace.
#[derive(Debug, Clone, PartialEq)]
pub enum SlotSelector {
    All,
    Empty,
    Fixed(Vec<usize>),
    /// `count` paths drawn uniformly without replacement every slot.
    Random { count: usize },
}

impl SlotSelector {
    pub(crate) fn pick<R: Rng>(&self, p: usize, rng: &mut R) -> Result<Vec<usize>> {
        match self {
            SlotSelector::All => Ok((0..p).collect()),
            SlotSelector::Empty => Ok(Vec::new()),
            SlotSelector::Fixed(list) => Ok(list.clone()),
            SlotSelector::Random { count } => {
                if *count > p {
                    return Err(Error::InvalidParameter(format!("cannot pick {count} of {p} paths")));
                }
                let mut s = index::sample(rng, p, *count).into_vec();
                s.sort_unstable();
                Ok(s)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub horizon: usize,
    pub seed: u64,
    pub noise: NoiseKind,
    pub selector: SlotSelector,
    /// Mean of `χ(0)`; zero when `None`.
    pub initial_mean: Option<DVector<f64>>,
    /// Covariance of `χ(0)`; `1 ms² · I` when `None`.
    pub initial_cov: Option<DMatrix<f64>>,
}

impl SimulationConfig {
    pub fn new(horizon: usize, seed: u64) -> Self {
        Self {
            horizon,
            seed,
            noise: NoiseKind::Gaussian,
            selector: SlotSelector::All,
            initial_mean: None,
            initial_cov: None,
        }
    }

    pub fn selector(mut self, selector: SlotSelector) -> Self {
        self.selector = selector;
        self
    }

    pub fn noise(mut self, noise: NoiseKind) -> Self {
        self.noise = noise;
        self
    }

    pub fn initial_state(mut self, mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        self.initial_mean = Some(mean);
        self.initial_cov = Some(cov);
        self
    }
}

struct NoiseSource {
    kind: NoiseKind,
    rng: ChaCha8Rng,
}

impl NoiseSource {
    fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Zero-mean vector with covariance `factor · factorᵀ`.
    fn correlated(&mut self, factor: &DMatrix<f64>) -> DVector<f64> {
        let n = factor.nrows();
        let g = DVector::from_fn(n, |_, _| self.normal());
        let scale = self.mixing_scale();
        factor * g * scale
    }

    /// Independent entries with variance `var`.
    fn independent(&mut self, n: usize, var: f64) -> DVector<f64> {
        let sd = var.sqrt();
        DVector::from_fn(n, |_, _| {
            let g = self.normal();
            g * sd * self.mixing_scale()
        })
    }

    fn mixing_scale(&mut self) -> f64 {
        match self.kind {
            NoiseKind::Gaussian => 1.0,
            NoiseKind::StudentT { dof } => {
                let w: f64 = ChiSquared::new(dof).expect("dof validated").sample(&mut self.rng);
                ((dof - 2.0) / w).sqrt()
            }
        }
    }
}

/// Draws a trace from the model. Identical `(params, config)` produce
/// bit-identical traces.
pub fn simulate_trace(params: &ModelParams, config: &SimulationConfig) -> Result<DelayTrace> {
    params.validate()?;
    if config.horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be >= 1".into()));
    }
    if let NoiseKind::StudentT { dof } = config.noise {
        if !(dof > 2.0) {
            return Err(Error::InvalidParameter(format!("Student-t dof must exceed 2, got {dof}")));
        }
    }
    let p = params.dim();
    let mean0 = config.initial_mean.clone().unwrap_or_else(|| DVector::zeros(p));
    let cov0 = config.initial_cov.clone().unwrap_or_else(|| DMatrix::identity(p, p));
    if mean0.len() != p || cov0.shape() != (p, p) {
        return Err(Error::Dimension("initial state does not match path count".into()));
    }
    let l0 = psd_factor(&cov0, "initial covariance")?;
    let l_eta = psd_factor(&params.c_eta, "c_eta")?;
    let l_nu = psd_factor(&params.c_nu, "c_nu")?;

    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
    noise_rng.set_stream(0);
    let mut select_rng = ChaCha8Rng::seed_from_u64(config.seed);
    select_rng.set_stream(1);
    let mut noise = NoiseSource {
        kind: config.noise,
        rng: noise_rng,
    };

    let mut chi = &mean0 + noise.correlated(&l0);
    let mut values = DMatrix::zeros(config.horizon, p);
    let mut selection = Vec::with_capacity(config.horizon);
    for t in 0..config.horizon {
        chi = &chi * params.damping_b + noise.correlated(&l_eta);
        let nu = noise.correlated(&l_nu);
        let eps = noise.independent(p, params.sigma2);
        let y = &chi + nu + eps;
        values.row_mut(t).copy_from(&y.transpose());
        selection.push(config.selector.pick(p, &mut select_rng)?);
    }
    let timestamps = (1..=config.horizon as i64).collect();
    DelayTrace::new(values, selection, timestamps)
}
