//! Game data: coefficients, action grids and the finite-dimensional measure view
//! that coefficients consume.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{CounterRng, Purpose};

pub type DriftFactorFn = dyn Fn(f64, &[f64], &MeasureSummary, &[f64]) -> DVector<f64> + Send + Sync;
pub type DiffusionFn = dyn Fn(f64, &[f64], &MeasureSummary, &[f64]) -> DMatrix<f64> + Send + Sync;
pub type RunningCostFn = dyn Fn(f64, &[f64], &MeasureSummary, &[f64], &[f64]) -> f64 + Send + Sync;
pub type TerminalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Finite ordered set of actions; the label of a point is its position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionGrid {
    points: Vec<Vec<f64>>,
}

impl ActionGrid {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidModel("action grid is empty".into()));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::InvalidModel("action points have mixed dimensions".into()));
        }
        for i in 0..points.len() {
            for j in 0..i {
                if points[i] == points[j] {
                    return Err(Error::InvalidModel(format!("duplicate action {:?}", points[i])));
                }
            }
        }
        Ok(Self { points })
    }

    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| vec![v]).collect())
    }

    pub fn linspace(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count == 1 {
            return Self::scalar(&[lo]);
        }
        let h = (hi - lo) / (count - 1) as f64;
        Self::scalar(&(0..count).map(|i| lo + h * i as f64).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, idx: usize) -> &[f64] {
        &self.points[idx]
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }
}

/// Declared sup-norm bounds. Vector and matrix coefficients are bounded entrywise,
/// except `drift` which bounds the Euclidean norm of `sigma * lambda`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBounds {
    pub drift_factor: f64,
    pub diffusion: f64,
    pub drift: f64,
    pub running_cost: f64,
    pub terminal_cost: f64,
    /// Local Lipschitz constant in x for lambda and sigma on the probe box.
    pub lipschitz_x: Option<f64>,
}

/// Piecewise-uniform 1-D marginal. A bin whose two edges coincide is an atom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
}

impl Histogram {
    pub fn atom(at: f64) -> Self {
        Self { edges: vec![at, at], masses: vec![1.0] }
    }

    /// Equal-width bins spanning the range of the positively weighted samples.
    pub fn from_weighted(values: &[f64], weights: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut total = 0.0;
        for (&v, &w) in values.iter().zip(weights) {
            if w > 0.0 {
                lo = lo.min(v);
                hi = hi.max(v);
                total += w;
            }
        }
        if !(hi > lo) {
            return Self::atom(lo);
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut masses = vec![0.0; bins];
        for (&v, &w) in values.iter().zip(weights) {
            if w > 0.0 {
                let k = (((v - lo) / width) as usize).min(bins - 1);
                masses[k] += w / total;
            }
        }
        Self { edges, masses }
    }

    pub fn lo(&self) -> f64 {
        self.edges[0]
    }

    pub fn hi(&self) -> f64 {
        *self.edges.last().unwrap()
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// Right-continuous CDF, mass spread uniformly inside each bin.
    pub fn cdf(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for (k, &m) in self.masses.iter().enumerate() {
            let (a, b) = (self.edges[k], self.edges[k + 1]);
            if x >= b {
                acc += m;
            } else if x > a {
                acc += m * (x - a) / (b - a);
            } else {
                break;
            }
        }
        acc
    }

    fn atom_mass_at(&self, x: f64) -> f64 {
        self.masses
            .iter()
            .enumerate()
            .filter(|(k, _)| self.edges[*k] == x && self.edges[k + 1] == x)
            .map(|(_, m)| m)
            .sum()
    }

    fn cdf_left(&self, x: f64) -> f64 {
        self.cdf(x) - self.atom_mass_at(x)
    }

    /// Width of the widest non-atomic bin, 0 for a pure atom.
    pub fn bin_width(&self) -> f64 {
        self.edges.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// Wasserstein-1 distance: integral of |F1 - F2|, exact for piecewise-linear CDFs.
    pub fn wasserstein1(&self, other: &Histogram) -> f64 {
        let mut pts: Vec<f64> = self.edges.iter().chain(other.edges.iter()).copied().collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts.dedup();
        let mut total = 0.0;
        for w in pts.windows(2) {
            let (u, v) = (w[0], w[1]);
            let d0 = self.cdf(u) - other.cdf(u);
            let d1 = self.cdf_left(v) - other.cdf_left(v);
            total += integrate_abs_linear(d0, d1, v - u);
        }
        total
    }

    /// Mixture `(1 - beta) * self + beta * other`, re-binned onto `bins` equal-width
    /// bins over the union range.
    pub fn mix(&self, other: &Histogram, beta: f64, bins: usize) -> Histogram {
        let lo = self.lo().min(other.lo());
        let hi = self.hi().max(other.hi());
        if !(hi > lo) {
            return Histogram::atom(lo);
        }
        let bins = bins.max(1);
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect();
        let cdf = |x: f64| (1.0 - beta) * self.cdf(x) + beta * other.cdf(x);
        let mut masses = Vec::with_capacity(bins);
        let mut prev = 0.0;
        for &e in &edges[1..] {
            let c = cdf(e);
            masses.push((c - prev).max(0.0));
            prev = c;
        }
        let s: f64 = masses.iter().sum();
        masses.iter_mut().for_each(|m| *m /= s);
        Histogram { edges, masses }
    }
}

/// Integral over an interval of length `len` of |g| where g is linear from `d0` to `d1`.
fn integrate_abs_linear(d0: f64, d1: f64, len: f64) -> f64 {
    if d0 * d1 >= 0.0 {
        0.5 * (d0.abs() + d1.abs()) * len
    } else {
        let root = d0.abs() / (d0.abs() + d1.abs());
        0.5 * (d0.abs() * root + d1.abs() * (1.0 - root)) * len
    }
}

/// Per-time moments and per-coordinate marginal histograms of a state law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureSummary {
    pub times: Vec<f64>,
    pub dim: usize,
    pub means: Vec<Vec<f64>>,
    /// Row-major `dim x dim` covariance per time.
    pub covs: Vec<Vec<f64>>,
    /// `histograms[time][coordinate]`.
    pub histograms: Vec<Vec<Histogram>>,
}

impl MeasureSummary {
    /// Law of the constant path `x0`.
    pub fn dirac(times: &[f64], x0: &[f64]) -> Self {
        let d = x0.len();
        Self {
            times: times.to_vec(),
            dim: d,
            means: vec![x0.to_vec(); times.len()],
            covs: vec![vec![0.0; d * d]; times.len()],
            histograms: vec![x0.iter().map(|&v| Histogram::atom(v)).collect(); times.len()],
        }
    }

    /// Index of the last grid time not after `t`.
    pub fn index_at(&self, t: f64) -> usize {
        let tol = 1e-12 * (1.0 + t.abs());
        self.times.partition_point(|&s| s <= t + tol).saturating_sub(1)
    }

    pub fn mean_at(&self, t: f64) -> &[f64] {
        &self.means[self.index_at(t)]
    }

    pub fn var_at(&self, t: f64, coord: usize) -> f64 {
        self.covs[self.index_at(t)][coord * self.dim + coord]
    }

    pub fn cov_at(&self, t: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.covs[self.index_at(t)])
    }

    pub fn same_grid(&self, other: &MeasureSummary) -> bool {
        self.dim == other.dim
            && self.times.len() == other.times.len()
            && self.times.iter().zip(&other.times).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + a.abs()))
    }

    /// Moments blended linearly, histograms blended as mixtures.
    pub fn blend(&self, other: &MeasureSummary, beta: f64, bins: usize) -> Result<MeasureSummary> {
        if !self.same_grid(other) {
            return Err(Error::GridMismatch("cannot blend summaries on different grids".into()));
        }
        let lin = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| (1.0 - beta) * x + beta * y).collect()
        };
        Ok(MeasureSummary {
            times: self.times.clone(),
            dim: self.dim,
            means: self.means.iter().zip(&other.means).map(|(a, b)| lin(a, b)).collect(),
            covs: self.covs.iter().zip(&other.covs).map(|(a, b)| lin(a, b)).collect(),
            histograms: self
                .histograms
                .iter()
                .zip(&other.histograms)
                .map(|(ha, hb)| ha.iter().zip(hb).map(|(x, y)| x.mix(y, beta, bins)).collect())
                .collect(),
        })
    }

    /// Checks mass normalization and symmetric PSD covariances.
    pub fn check(&self) -> Result<()> {
        for (j, hs) in self.histograms.iter().enumerate() {
            for h in hs {
                if (h.total_mass() - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidModel(format!("histogram mass {} at time index {j}", h.total_mass())));
                }
            }
        }
        for c in &self.covs {
            let m = DMatrix::from_row_slice(self.dim, self.dim, c);
            if (&m - m.transpose()).amax() > 1e-12 {
                return Err(Error::InvalidModel("covariance not symmetric".into()));
            }
            if m.symmetric_eigenvalues().min() < -1e-12 {
                return Err(Error::InvalidModel("covariance not PSD".into()));
            }
        }
        Ok(())
    }
}

/// The game's data. Coefficients read the state only through its current value
/// and the measure only through a [`MeasureSummary`].
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub dim_state: usize,
    /// Total Brownian dimension `p`; the last `common_noise_dim` columns of sigma
    /// load on the common noise.
    pub noise_dim: usize,
    pub common_noise_dim: usize,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub drift_factor: Arc<DriftFactorFn>,
    pub diffusion: Arc<DiffusionFn>,
    pub running_cost: Arc<RunningCostFn>,
    pub terminal_cost: Arc<TerminalFn>,
    pub drift_actions: ActionGrid,
    pub diffusion_actions: ActionGrid,
    pub bounds: CoefficientBounds,
    /// Per-coordinate `(lo, hi)` box on which bounds are probed.
    pub probe_box: Vec<(f64, f64)>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("dim_state", &self.dim_state)
            .field("noise_dim", &self.noise_dim)
            .field("common_noise_dim", &self.common_noise_dim)
            .field("horizon", &self.horizon)
            .field("x0", &self.x0)
            .field("drift_actions", &self.drift_actions.len())
            .field("diffusion_actions", &self.diffusion_actions.len())
            .finish()
    }
}

/// Coefficients evaluated at one point and one pure action pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientPoint {
    /// `sigma * lambda`
    pub drift: DVector<f64>,
    pub diffusion: DMatrix<f64>,
    /// `sigma * sigma^T`, symmetrized.
    pub cov: DMatrix<f64>,
    pub cost: f64,
}

impl ModelSpec {
    pub fn check_structure(&self) -> Result<()> {
        if self.dim_state == 0 {
            return Err(Error::InvalidModel("dim_state must be at least 1".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidModel("horizon must be positive".into()));
        }
        if self.x0.len() != self.dim_state {
            return Err(Error::InvalidModel("x0 length differs from dim_state".into()));
        }
        if self.common_noise_dim > self.noise_dim {
            return Err(Error::InvalidModel("common_noise_dim exceeds noise_dim".into()));
        }
        if self.probe_box.len() != self.dim_state {
            return Err(Error::InvalidModel("probe box dimension differs from dim_state".into()));
        }
        Ok(())
    }

    pub fn ka(&self) -> usize {
        self.drift_actions.len()
    }

    pub fn kb(&self) -> usize {
        self.diffusion_actions.len()
    }

    pub fn lambda(&self, t: f64, x: &[f64], m: &MeasureSummary, a_idx: usize) -> DVector<f64> {
        (self.drift_factor)(t, x, m, self.drift_actions.point(a_idx))
    }

    pub fn sigma(&self, t: f64, x: &[f64], m: &MeasureSummary, b_idx: usize) -> DMatrix<f64> {
        (self.diffusion)(t, x, m, self.diffusion_actions.point(b_idx))
    }

    pub fn cost(&self, t: f64, x: &[f64], m: &MeasureSummary, a_idx: usize, b_idx: usize) -> f64 {
        (self.running_cost)(t, x, m, self.drift_actions.point(a_idx), self.diffusion_actions.point(b_idx))
    }

    pub fn terminal(&self, x: &[f64]) -> f64 {
        (self.terminal_cost)(x)
    }

    /// `sigma * sigma^T` for diffusion action `b_idx`, symmetrized.
    pub fn cov(&self, t: f64, x: &[f64], m: &MeasureSummary, b_idx: usize) -> DMatrix<f64> {
        symmetrize(&covariance_of(&self.sigma(t, x, m, b_idx)))
    }

    /// Full evaluation at a pure action pair.
    pub fn eval_coefficients(
        &self,
        t: f64,
        x: &[f64],
        m: &MeasureSummary,
        a_idx: usize,
        b_idx: usize,
    ) -> Result<CoefficientPoint> {
        if a_idx >= self.ka() || b_idx >= self.kb() {
            return Err(Error::InvalidModel(format!("action pair ({a_idx}, {b_idx}) out of range")));
        }
        let lambda = self.lambda(t, x, m, a_idx);
        let sigma = self.sigma(t, x, m, b_idx);
        let cost = self.cost(t, x, m, a_idx, b_idx);
        let loc = || format!("t={t}, x={x:?}, a={a_idx}, b={b_idx}");
        if sigma.nrows() != self.dim_state || sigma.ncols() != self.noise_dim || lambda.len() != self.noise_dim {
            return Err(Error::InvalidModel(format!(
                "sigma is {}x{}, lambda has length {}; expected {}x{} and {}",
                sigma.nrows(),
                sigma.ncols(),
                lambda.len(),
                self.dim_state,
                self.noise_dim,
                self.noise_dim
            )));
        }
        if !lambda.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteCoefficient { name: "lambda".into(), location: loc() });
        }
        if !sigma.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteCoefficient { name: "sigma".into(), location: loc() });
        }
        if !cost.is_finite() {
            return Err(Error::NonFiniteCoefficient { name: "f".into(), location: loc() });
        }
        let drift = &sigma * &lambda;
        let cov = symmetrize(&covariance_of(&sigma));
        Ok(CoefficientPoint { drift, diffusion: sigma, cov, cost })
    }
}

pub fn covariance_of(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    sigma * sigma.transpose()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// One flagged probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub coefficient: String,
    pub kind: ViolationKind,
    pub value: f64,
    pub bound: f64,
    pub location: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    NonFinite,
    Bound,
    Lipschitz,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub probes: usize,
    pub max_abs_lambda: f64,
    pub max_abs_sigma: f64,
    pub max_drift_norm: f64,
    pub max_abs_f: f64,
    pub max_abs_xi: f64,
    pub max_lipschitz_ratio: f64,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let (mut out, mut scale) = (0.0, inv);
    while i > 0 {
        out += (i % base) as f64 * scale;
        i /= base;
        scale *= inv;
    }
    out
}

const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

/// Probe points: box corners at t=0 and t=T, then a randomly shifted Halton set over (t, x).
fn probe_points(spec: &ModelSpec, probes: usize, seed: u64) -> Vec<(f64, Vec<f64>)> {
    let d = spec.dim_state;
    let mut pts = Vec::new();
    if d <= 8 {
        for corner in 0..(1usize << d) {
            let x: Vec<f64> = (0..d)
                .map(|k| if corner >> k & 1 == 1 { spec.probe_box[k].1 } else { spec.probe_box[k].0 })
                .collect();
            pts.push((0.0, x.clone()));
            pts.push((spec.horizon, x));
        }
    }
    let mut rng = CounterRng::new(seed, Purpose::Probe, 0, 0);
    let shift: Vec<f64> = (0..=d).map(|_| rng.uniform()).collect();
    for i in 1..=probes as u64 {
        let u: Vec<f64> = (0..=d)
            .map(|k| (radical_inverse(i, PRIMES[k % PRIMES.len()]) + shift[k]).fract())
            .collect();
        let t = u[0] * spec.horizon;
        let x = (0..d)
            .map(|k| {
                let (lo, hi) = spec.probe_box[k];
                lo + (hi - lo) * u[k + 1]
            })
            .collect();
        pts.push((t, x));
    }
    pts
}

/// Probes every coefficient at quasi-random points for every action pair and
/// records all exceedances without failing.
pub fn probe_model(spec: &ModelSpec, probes: usize, seed: u64) -> Result<ValidationReport> {
    spec.check_structure()?;
    let m = MeasureSummary::dirac(&[0.0, spec.horizon], &spec.x0);
    let b = &spec.bounds;
    let mut rep = ValidationReport {
        probes,
        max_abs_lambda: 0.0,
        max_abs_sigma: 0.0,
        max_drift_norm: 0.0,
        max_abs_f: 0.0,
        max_abs_xi: 0.0,
        max_lipschitz_ratio: 0.0,
        violations: Vec::new(),
    };
    let push = |rep: &mut ValidationReport, name: &str, kind, value: f64, bound: f64, loc: String| {
        rep.violations.push(Violation { coefficient: name.into(), kind, value, bound, location: loc });
    };
    for (t, x) in probe_points(spec, probes, seed) {
        let xi = spec.terminal(&x);
        let loc_x = format!("t={t:.6}, x={x:?}");
        if !xi.is_finite() {
            push(&mut rep, "xi", ViolationKind::NonFinite, xi, b.terminal_cost, loc_x.clone());
        } else {
            rep.max_abs_xi = rep.max_abs_xi.max(xi.abs());
        }
        let h: Vec<f64> = spec.probe_box.iter().map(|(lo, hi)| 1e-5 * (hi - lo).max(1e-3)).collect();
        for ai in 0..spec.ka() {
            let lam = spec.lambda(t, &x, &m, ai);
            let amax = lam.amax();
            if !lam.iter().all(|v| v.is_finite()) {
                push(&mut rep, "lambda", ViolationKind::NonFinite, f64::NAN, b.drift_factor, format!("{loc_x}, a={ai}"));
                continue;
            }
            rep.max_abs_lambda = rep.max_abs_lambda.max(amax);
            if let Some(lip) = b.lipschitz_x {
                for k in 0..spec.dim_state {
                    let mut xp = x.clone();
                    xp[k] += h[k];
                    let ratio = (spec.lambda(t, &xp, &m, ai) - &lam).norm() / h[k];
                    rep.max_lipschitz_ratio = rep.max_lipschitz_ratio.max(ratio);
                    if ratio > lip {
                        push(&mut rep, "lambda", ViolationKind::Lipschitz, ratio, lip, format!("{loc_x}, a={ai}"));
                    }
                }
            }
        }
        for bi in 0..spec.kb() {
            let sig = spec.sigma(t, &x, &m, bi);
            if !sig.iter().all(|v| v.is_finite()) {
                push(&mut rep, "sigma", ViolationKind::NonFinite, f64::NAN, b.diffusion, format!("{loc_x}, b={bi}"));
                continue;
            }
            rep.max_abs_sigma = rep.max_abs_sigma.max(sig.amax());
            if let Some(lip) = b.lipschitz_x {
                for k in 0..spec.dim_state {
                    let mut xp = x.clone();
                    xp[k] += h[k];
                    let ratio = (spec.sigma(t, &xp, &m, bi) - &sig).norm() / h[k];
                    rep.max_lipschitz_ratio = rep.max_lipschitz_ratio.max(ratio);
                    if ratio > lip {
                        push(&mut rep, "sigma", ViolationKind::Lipschitz, ratio, lip, format!("{loc_x}, b={bi}"));
                    }
                }
            }
            for ai in 0..spec.ka() {
                let f = spec.cost(t, &x, &m, ai, bi);
                if !f.is_finite() {
                    push(&mut rep, "f", ViolationKind::NonFinite, f, b.running_cost, format!("{loc_x}, a={ai}, b={bi}"));
                    continue;
                }
                rep.max_abs_f = rep.max_abs_f.max(f.abs());
                let drift = (&sig * spec.lambda(t, &x, &m, ai)).norm();
                if drift.is_finite() {
                    rep.max_drift_norm = rep.max_drift_norm.max(drift);
                }
            }
        }
    }
    let worst = [
        ("lambda", rep.max_abs_lambda, b.drift_factor),
        ("sigma", rep.max_abs_sigma, b.diffusion),
        ("sigma_lambda", rep.max_drift_norm, b.drift),
        ("f", rep.max_abs_f, b.running_cost),
        ("xi", rep.max_abs_xi, b.terminal_cost),
    ];
    for (name, value, bound) in worst {
        if value > bound {
            push(&mut rep, name, ViolationKind::Bound, value, bound, "max over probes".into());
        }
    }
    Ok(rep)
}

/// Probe-checks the declared bounds. Non-finite values and bound exceedances are
/// errors (the worst one is returned); Lipschitz exceedances stay in the report.
pub fn validate_model(spec: &ModelSpec, probes: usize, seed: u64) -> Result<ValidationReport> {
    let rep = probe_model(spec, probes, seed)?;
    if let Some(v) = rep.violations.iter().find(|v| v.kind == ViolationKind::NonFinite) {
        return Err(Error::NonFiniteCoefficient { name: v.coefficient.clone(), location: v.location.clone() });
    }
    let worst = rep
        .violations
        .iter()
        .filter(|v| v.kind == ViolationKind::Bound)
        .max_by(|a, b| (a.value / a.bound).partial_cmp(&(b.value / b.bound)).unwrap());
    if let Some(v) = worst {
        return Err(Error::BoundViolation { name: v.coefficient.clone(), value: v.value, bound: v.bound });
    }
    Ok(rep)
}
