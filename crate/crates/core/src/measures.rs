//! Particle representations of path laws, the common-noise cell machinery and
//! marginal distances.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{Histogram, MeasureSummary};

/// N simulated paths on a common time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    pub times: Vec<f64>,
    pub dim: usize,
    pub n_particles: usize,
    /// Flat `N x (L+1) x d`.
    pub states: Vec<f64>,
    pub noise_dim: usize,
    /// Cumulative common-noise paths, flat `N x (L+1) x p0`.
    pub noise0: Option<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Covariance actually applied on each step, flat `N x L x d x d`.
    pub applied_cov: Option<Vec<f64>>,
    /// Realized running reward integrated along each path.
    pub running_reward: Option<Vec<f64>>,
}

impl ParticleEnsemble {
    /// Uniform weights, no auxiliary data.
    pub fn from_states(times: Vec<f64>, dim: usize, states: Vec<f64>) -> Result<Self> {
        let steps = times.len();
        if steps == 0 || dim == 0 || states.len() % (steps * dim) != 0 {
            return Err(Error::GridMismatch("state array does not match times x dim".into()));
        }
        let n = states.len() / (steps * dim);
        let ens = Self {
            times,
            dim,
            n_particles: n,
            states,
            noise_dim: 0,
            noise0: None,
            weights: vec![1.0 / n as f64; n],
            applied_cov: None,
            running_reward: None,
        };
        ens.check()?;
        Ok(ens)
    }

    pub fn check(&self) -> Result<()> {
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::IncompatibleGrid("times must be strictly increasing".into()));
        }
        if self.times[0] != 0.0 {
            return Err(Error::IncompatibleGrid("times must start at 0".into()));
        }
        if self.weights.len() != self.n_particles || self.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidModel("weights must be nonnegative, one per particle".into()));
        }
        let s: f64 = self.weights.iter().sum();
        // summation error grows with the particle count
        if (s - 1.0).abs() > 1e-14 * self.n_particles.max(100) as f64 {
            return Err(Error::InvalidModel(format!("weights sum to {s}")));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn path(&self, i: usize) -> &[f64] {
        let len = self.times.len() * self.dim;
        &self.states[i * len..(i + 1) * len]
    }

    pub fn state(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.times.len() + j) * self.dim;
        &self.states[base..base + self.dim]
    }

    pub fn noise_path(&self, i: usize) -> Option<&[f64]> {
        let len = self.times.len() * self.noise_dim;
        self.noise0.as_ref().map(|w| &w[i * len..(i + 1) * len])
    }

    /// Applied covariance on step `j` (from `t_j` to `t_{j+1}`), row-major.
    pub fn cov(&self, i: usize, j: usize) -> Option<&[f64]> {
        let dd = self.dim * self.dim;
        let base = (i * self.steps() + j) * dd;
        self.applied_cov.as_ref().map(|c| &c[base..base + dd])
    }

    pub fn whole(self: &Arc<Self>) -> EmpiricalPathMeasure {
        EmpiricalPathMeasure {
            ensemble: Arc::clone(self),
            indices: (0..self.n_particles).collect(),
            weights: self.weights.clone(),
            mass: 1.0,
        }
    }

    /// One header row with the times, one column-header row, then one row per
    /// particle per time.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let times: Vec<String> = self.times.iter().map(|t| format!("{t:?}")).collect();
        writeln!(out, "times,{}", times.join(","))?;
        let mut header = vec!["particle".to_string(), "step".into(), "weight".into()];
        header.extend((0..self.dim).map(|k| format!("x{k}")));
        header.extend((0..self.noise_dim).map(|k| format!("w0_{k}")));
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.n_particles {
            for j in 0..self.times.len() {
                let mut row = vec![i.to_string(), j.to_string(), format!("{:?}", self.weights[i])];
                row.extend(self.state(i, j).iter().map(|v| format!("{v:?}")));
                if let Some(w) = self.noise_path(i) {
                    row.extend(w[j * self.noise_dim..(j + 1) * self.noise_dim].iter().map(|v| format!("{v:?}")));
                }
                writeln!(out, "{}", row.join(","))?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let parse_err = |line: usize, message: String| Error::ConfigParse { line: line + 1, message };
        let (l0, first) = lines.next().ok_or_else(|| parse_err(0, "empty file".into()))?;
        let first = first?;
        let mut cells = first.split(',');
        if cells.next() != Some("times") {
            return Err(parse_err(l0, "expected `times` header".into()));
        }
        let times = cells
            .map(|c| c.trim().parse::<f64>().map_err(|e| parse_err(l0, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let (l1, header) = lines.next().ok_or_else(|| parse_err(1, "missing column header".into()))?;
        let header = header?;
        let cols: Vec<&str> = header.split(',').collect();
        let dim = cols.iter().filter(|c| c.starts_with('x')).count();
        let noise_dim = cols.iter().filter(|c| c.starts_with("w0_")).count();
        if dim == 0 {
            return Err(parse_err(l1, "no state columns".into()));
        }
        let (mut states, mut noise, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        for (ln, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals = line
                .split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|e| parse_err(ln, e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != 3 + dim + noise_dim {
                return Err(parse_err(ln, format!("expected {} fields", 3 + dim + noise_dim)));
            }
            if vals[1] == 0.0 {
                weights.push(vals[2]);
            }
            states.extend_from_slice(&vals[3..3 + dim]);
            noise.extend_from_slice(&vals[3 + dim..]);
        }
        let n = weights.len();
        if states.len() != n * times.len() * dim {
            return Err(parse_err(0, "row count does not match particles x times".into()));
        }
        let ens = Self {
            times,
            dim,
            n_particles: n,
            states,
            noise_dim,
            noise0: if noise_dim > 0 { Some(noise) } else { None },
            weights,
            applied_cov: None,
            running_reward: None,
        };
        ens.check()?;
        Ok(ens)
    }
}

/// Weighted empirical law of a subset of an ensemble's particles.
#[derive(Debug, Clone)]
pub struct EmpiricalPathMeasure {
    pub ensemble: Arc<ParticleEnsemble>,
    pub indices: Vec<usize>,
    /// Renormalized to sum to one.
    pub weights: Vec<f64>,
    /// Total weight of the subset in the parent ensemble.
    pub mass: f64,
}

impl EmpiricalPathMeasure {
    pub fn subset(ensemble: Arc<ParticleEnsemble>, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidModel("empty particle subset".into()));
        }
        let raw: Vec<f64> = indices.iter().map(|&i| ensemble.weights[i]).collect();
        let mass: f64 = raw.iter().sum();
        let weights = if mass > 0.0 {
            raw.iter().map(|w| w / mass).collect()
        } else {
            vec![1.0 / indices.len() as f64; indices.len()]
        };
        Ok(Self { ensemble, indices, weights, mass })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn marginal(&self, j: usize, k: usize) -> Vec<(f64, f64)> {
        self.indices
            .iter()
            .zip(&self.weights)
            .map(|(&i, &w)| (self.ensemble.state(i, j)[k], w))
            .collect()
    }
}

/// Laws with 1-D marginals on a time grid.
pub trait MarginalMeasure {
    fn grid(&self) -> &[f64];
    fn state_dim(&self) -> usize;
    fn marginal_w1(&self, other: &Self, time_idx: usize, coord: usize) -> f64;
}

impl MarginalMeasure for MeasureSummary {
    fn grid(&self) -> &[f64] {
        &self.times
    }

    fn state_dim(&self) -> usize {
        self.dim
    }

    fn marginal_w1(&self, other: &Self, j: usize, k: usize) -> f64 {
        self.histograms[j][k].wasserstein1(&other.histograms[j][k])
    }
}

impl MarginalMeasure for EmpiricalPathMeasure {
    fn grid(&self) -> &[f64] {
        &self.ensemble.times
    }

    fn state_dim(&self) -> usize {
        self.ensemble.dim
    }

    fn marginal_w1(&self, other: &Self, j: usize, k: usize) -> f64 {
        weighted_w1(self.marginal(j, k), other.marginal(j, k))
    }
}

/// W1 between two weighted point clouds on the line via their sorted CDFs.
pub fn weighted_w1(mut a: Vec<(f64, f64)>, mut b: Vec<(f64, f64)>) -> f64 {
    let cmp = |x: &(f64, f64), y: &(f64, f64)| x.0.partial_cmp(&y.0).unwrap();
    a.sort_by(cmp);
    b.sort_by(cmp);
    let (mut ia, mut ib) = (0, 0);
    let (mut fa, mut fb) = (0.0_f64, 0.0_f64);
    let mut prev: Option<f64> = None;
    let mut total = 0.0_f64;
    while ia < a.len() || ib < b.len() {
        let next = match (a.get(ia), b.get(ib)) {
            (Some(x), Some(y)) => x.0.min(y.0),
            (Some(x), None) => x.0,
            (None, Some(y)) => y.0,
            (None, None) => unreachable!(),
        };
        if let Some(p) = prev {
            total += (fa - fb).abs() * (next - p);
        }
        while ia < a.len() && a[ia].0 == next {
            fa += a[ia].1;
            ia += 1;
        }
        while ib < b.len() && b[ib].0 == next {
            fb += b[ib].1;
            ib += 1;
        }
        prev = Some(next);
    }
    total
}

/// Mean over grid times and coordinates of the marginal W1 distances.
pub fn measure_distance<M: MarginalMeasure>(m1: &M, m2: &M) -> Result<f64> {
    let (g1, g2) = (m1.grid(), m2.grid());
    if g1.len() != g2.len()
        || m1.state_dim() != m2.state_dim()
        || g1.iter().zip(g2).any(|(a, b)| (a - b).abs() > 1e-12 * (1.0 + a.abs()))
    {
        return Err(Error::GridMismatch(format!("{} vs {} grid points", g1.len(), g2.len())));
    }
    let d = m1.state_dim();
    let mut total = 0.0_f64;
    for j in 0..g1.len() {
        for k in 0..d {
            total += m1.marginal_w1(m2, j, k);
        }
    }
    Ok(total / (g1.len() * d) as f64)
}

/// Per-time weighted moments and equal-width marginal histograms.
pub fn summarize(m: &EmpiricalPathMeasure, bins: usize) -> MeasureSummary {
    let ens = &m.ensemble;
    let d = ens.dim;
    let nt = ens.times.len();
    let mut means = Vec::with_capacity(nt);
    let mut covs = Vec::with_capacity(nt);
    let mut histograms = Vec::with_capacity(nt);
    for j in 0..nt {
        let mut mean = vec![0.0; d];
        for (&i, &w) in m.indices.iter().zip(&m.weights) {
            for (mk, xk) in mean.iter_mut().zip(ens.state(i, j)) {
                *mk += w * xk;
            }
        }
        let mut cov = vec![0.0; d * d];
        for (&i, &w) in m.indices.iter().zip(&m.weights) {
            if w == 0.0 {
                continue;
            }
            let x = ens.state(i, j);
            for r in 0..d {
                for c in r..d {
                    cov[r * d + c] += w * (x[r] - mean[r]) * (x[c] - mean[c]);
                }
            }
        }
        for r in 0..d {
            for c in 0..r {
                cov[r * d + c] = cov[c * d + r];
            }
        }
        let hs = (0..d)
            .map(|k| {
                let vals: Vec<f64> = m.indices.iter().map(|&i| ens.state(i, j)[k]).collect();
                Histogram::from_weighted(&vals, &m.weights, bins)
            })
            .collect();
        means.push(mean);
        covs.push(cov);
        histograms.push(hs);
    }
    MeasureSummary { times: ens.times.clone(), dim: d, means, covs, histograms }
}

/// Product of per-coordinate dyadic standard-normal quantile bins, applied to
/// increments standardized by the dyadic step's standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPartition {
    pub level: u32,
    pub noise_dim: usize,
    pub horizon: f64,
    /// Interior edges of the standardized partition of one coordinate
    /// (`2^level - 1` values).
    pub std_edges: Vec<f64>,
}

pub fn build_partition(level: u32, noise_dim: usize, horizon: f64) -> Result<CellPartition> {
    if level == 0 || level > 16 {
        return Err(Error::InvalidModel("partition level must be in 1..=16".into()));
    }
    if noise_dim == 0 {
        return Err(Error::MissingCommonNoise);
    }
    let normal = Normal::standard();
    let bins = 1usize << level;
    let std_edges = (1..bins)
        .map(|k| {
            let q = k as f64 / bins as f64;
            // exact at the median so that the level-1 split sits at zero
            if 2 * k == bins { 0.0 } else { normal.inverse_cdf(q) }
        })
        .collect();
    Ok(CellPartition { level, noise_dim, horizon, std_edges })
}

impl CellPartition {
    /// Number of dyadic increments `2^level`.
    pub fn steps(&self) -> usize {
        1 << self.level
    }

    pub fn bins_per_coord(&self) -> usize {
        1 << self.level
    }

    pub fn bins(&self) -> usize {
        self.bins_per_coord().pow(self.noise_dim as u32)
    }

    pub fn dyadic_dt(&self) -> f64 {
        self.horizon / self.steps() as f64
    }

    /// Edges in increment units for one coordinate.
    pub fn edges_for_step(&self) -> Vec<f64> {
        let s = self.dyadic_dt().sqrt();
        self.std_edges.iter().map(|e| e * s).collect()
    }

    /// Bins are `(-inf, e_1], (e_1, e_2], ..., (e_last, inf)`.
    pub fn coord_bin(&self, increment: f64) -> usize {
        let z = increment / self.dyadic_dt().sqrt();
        self.std_edges.partition_point(|&e| z > e)
    }

    pub fn bin_of(&self, increment: &[f64]) -> u32 {
        let base = self.bins_per_coord();
        increment.iter().rev().fold(0usize, |acc, &v| acc * base + self.coord_bin(v)) as u32
    }

    /// Expected number of particles per cell path under equal-probability bins.
    pub fn expected_occupancy(&self, n_particles: usize) -> f64 {
        let cells = (self.bins() as f64).powi(self.steps() as i32);
        n_particles as f64 / cells
    }
}

/// Sequence of increment bins along the dyadic grid.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellPathIndex {
    pub codes: Vec<u32>,
}

impl fmt::Display for CellPathIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.codes.iter().map(|c| c.to_string()).collect();
        write!(f, "{}", parts.join("-"))
    }
}

impl std::str::FromStr for CellPathIndex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let codes = s
            .split('-')
            .map(|c| c.parse::<u32>().map_err(|e| Error::InvalidModel(format!("bad cell code `{s}`: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self { codes })
    }
}

/// Positions of the dyadic points `k T / 2^n` in `times`.
pub fn dyadic_indices(times: &[f64], level: u32) -> Result<Vec<usize>> {
    let horizon = *times.last().unwrap();
    let steps = 1usize << level;
    (0..=steps)
        .map(|k| {
            let t = horizon * k as f64 / steps as f64;
            times
                .iter()
                .position(|&s| (s - t).abs() <= 1e-9 * (1.0 + horizon))
                .ok_or_else(|| Error::IncompatibleGrid(format!("dyadic time {t} missing at level {level}")))
        })
        .collect()
}

/// Cell path of one common-noise path (`times.len() x p0`, flat).
pub fn cell_path(w0: &[f64], times: &[f64], part: &CellPartition) -> Result<CellPathIndex> {
    let p0 = part.noise_dim;
    if w0.len() != times.len() * p0 {
        return Err(Error::IncompatibleGrid("noise path length does not match grid".into()));
    }
    if (times.last().unwrap() - part.horizon).abs() > 1e-9 * (1.0 + part.horizon) {
        return Err(Error::IncompatibleGrid("noise path horizon differs from partition".into()));
    }
    let idx = dyadic_indices(times, part.level)?;
    let codes = idx
        .windows(2)
        .map(|w| {
            let inc: Vec<f64> = (0..p0).map(|k| w0[w[1] * p0 + k] - w0[w[0] * p0 + k]).collect();
            part.bin_of(&inc)
        })
        .collect();
    Ok(CellPathIndex { codes })
}

/// Lagged piecewise-linear interpolation on the dyadic grid of level `n`:
/// on `[t_k, t_{k+1})` the value moves linearly from `X_{t_{k-1}}` to `X_{t_k}`,
/// and it is frozen at `X_0` on the first interval. `path` is `times.len() x dim`.
pub fn adapted_interpolate(path: &[f64], times: &[f64], dim: usize, level: u32, query: &[f64]) -> Result<Vec<f64>> {
    let horizon = *times.last().unwrap();
    let idx = dyadic_indices(times, level)?;
    let steps = 1usize << level;
    let h = horizon / steps as f64;
    let at = |k: usize| &path[idx[k] * dim..(idx[k] + 1) * dim];
    let mut out = Vec::with_capacity(query.len() * dim);
    for &t in query {
        // the floating k is clamped so that t = T falls in the last interval
        let k = ((t / h + 1e-9).floor() as usize).min(steps - 1);
        if k == 0 {
            out.extend_from_slice(at(0));
            continue;
        }
        let tk = k as f64 * h;
        let s = ((t - tk) / h).clamp(0.0, 1.0);
        let (prev, cur) = (at(k - 1), at(k));
        out.extend(prev.iter().zip(cur).map(|(p, c)| (1.0 - s) * p + s * c));
    }
    Ok(out)
}

/// Apply [`adapted_interpolate`] to every particle on the ensemble's own grid.
pub fn interpolate_ensemble(ens: &ParticleEnsemble, level: u32) -> Result<ParticleEnsemble> {
    let mut states = Vec::with_capacity(ens.states.len());
    for i in 0..ens.n_particles {
        states.extend(adapted_interpolate(ens.path(i), &ens.times, ens.dim, level, &ens.times)?);
    }
    Ok(ParticleEnsemble {
        states,
        applied_cov: None,
        running_reward: None,
        ..ens.clone()
    })
}

/// Cell path of each particle's common noise.
pub fn cell_paths(ens: &ParticleEnsemble, part: &CellPartition) -> Result<Vec<CellPathIndex>> {
    if ens.noise0.is_none() || ens.noise_dim != part.noise_dim {
        return Err(Error::MissingCommonNoise);
    }
    (0..ens.n_particles)
        .map(|i| cell_path(ens.noise_path(i).unwrap(), &ens.times, part))
        .collect()
}

/// Conditional laws of the interpolated states given the cell path.
#[derive(Debug, Clone)]
pub struct BucketMap {
    pub level: u32,
    pub interpolated: Arc<ParticleEnsemble>,
    pub buckets: BTreeMap<CellPathIndex, EmpiricalPathMeasure>,
}

impl BucketMap {
    pub fn total_count(&self) -> usize {
        self.buckets.values().map(|b| b.len()).sum()
    }

    /// JSON object keyed by the code string.
    pub fn to_json(&self, bins: usize) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        for (code, m) in &self.buckets {
            obj.insert(
                code.to_string(),
                serde_json::json!({
                    "count": m.len(),
                    "mass": m.mass,
                    "summary": summarize(m, bins),
                }),
            );
        }
        serde_json::json!({ "level": self.level, "buckets": obj })
    }
}

pub fn conditional_buckets(ens: &ParticleEnsemble, part: &CellPartition) -> Result<BucketMap> {
    let codes = cell_paths(ens, part)?;
    let interpolated = Arc::new(interpolate_ensemble(ens, part.level)?);
    let mut groups: BTreeMap<CellPathIndex, Vec<usize>> = BTreeMap::new();
    for (i, c) in codes.into_iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let buckets = groups
        .into_iter()
        .map(|(c, idx)| Ok((c, EmpiricalPathMeasure::subset(Arc::clone(&interpolated), idx)?)))
        .collect::<Result<_>>()?;
    Ok(BucketMap { level: part.level, interpolated, buckets })
}

/// For every coarse cell path, the particle counts of the fine cell paths it
/// splits into. The parent of a particle is the coarse code of its own noise path.
pub fn coarsen_counts(
    ens: &ParticleEnsemble,
    fine: &CellPartition,
    coarse: &CellPartition,
) -> Result<BTreeMap<CellPathIndex, BTreeMap<CellPathIndex, usize>>> {
    let f = cell_paths(ens, fine)?;
    let c = cell_paths(ens, coarse)?;
    let mut out: BTreeMap<CellPathIndex, BTreeMap<CellPathIndex, usize>> = BTreeMap::new();
    for (fc, cc) in f.into_iter().zip(c) {
        *out.entry(cc).or_default().entry(fc).or_default() += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(steps: usize) -> Vec<f64> {
        (0..=steps).map(|j| j as f64 / steps as f64).collect()
    }

    #[test]
    fn w1_of_shifted_clouds() {
        let a: Vec<(f64, f64)> = (0..4).map(|k| (k as f64, 0.25)).collect();
        let b: Vec<(f64, f64)> = a.iter().map(|&(x, w)| (x + 0.5, w)).collect();
        assert!((weighted_w1(a.clone(), b) - 0.5).abs() < 1e-12);
        assert_eq!(weighted_w1(a.clone(), a), 0.0);
    }

    #[test]
    fn summary_moments_match_hand_values() {
        let ens = ParticleEnsemble::from_states(vec![0.0, 1.0], 1, vec![0.0, 1.0, 0.0, 3.0]).unwrap();
        let s = summarize(&Arc::new(ens).whole(), 4);
        assert_eq!(s.means[1], vec![2.0]);
        assert!((s.covs[1][0] - 1.0).abs() < 1e-12);
        assert_eq!(s.covs[0][0], 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let ens = ParticleEnsemble::from_states(grid(2), 1, vec![0.0, 0.5, -1.25, 0.0, 0.1, 0.2]).unwrap();
        let mut buf = Vec::new();
        ens.write_csv(&mut buf).unwrap();
        let back = ParticleEnsemble::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.states, ens.states);
        assert_eq!(back.times, ens.times);
    }

    #[test]
    fn level_one_splits_at_zero() {
        let p = build_partition(1, 1, 1.0).unwrap();
        assert_eq!(p.std_edges, vec![0.0]);
        assert_eq!(p.coord_bin(-0.1), 0);
        assert_eq!(p.coord_bin(0.0), 0);
        assert_eq!(p.coord_bin(0.1), 1);
        assert_eq!(p.expected_occupancy(400), 100.0);
        assert!(build_partition(0, 1, 1.0).is_err());
        assert!(matches!(build_partition(1, 0, 1.0), Err(Error::MissingCommonNoise)));
    }

    #[test]
    fn level_two_bins_are_quartiles() {
        let p = build_partition(2, 1, 1.0).unwrap();
        assert_eq!(p.std_edges.len(), 3);
        assert!((p.std_edges[0] + 0.674489750196).abs() < 1e-9);
        assert!((p.std_edges[2] - 0.674489750196).abs() < 1e-9);
    }

    #[test]
    fn cell_path_reads_dyadic_increments() {
        let times = grid(4);
        let part = build_partition(1, 1, 1.0).unwrap();
        // down over [0, 1/2], up over [1/2, 1]
        let w0 = [0.0, -0.3, -0.2, 0.4, 0.5];
        let c = cell_path(&w0, &times, &part).unwrap();
        assert_eq!(c.codes, vec![0, 1]);
        assert_eq!(c.to_string(), "0-1");
        assert_eq!("0-1".parse::<CellPathIndex>().unwrap(), c);
        assert!(cell_path(&w0[..4], &times, &part).is_err());
    }

    #[test]
    fn interpolation_lags_one_dyadic_step() {
        let times = grid(8);
        let path: Vec<f64> = times.iter().map(|t| t * t).collect();
        let out = adapted_interpolate(&path, &times, 1, 2, &times).unwrap();
        // frozen on the first quarter
        assert_eq!(&out[..2], &[0.0, 0.0]);
        // at t = 1/2 the value is X(1/4)
        assert!((out[4] - 1.0 / 16.0).abs() < 1e-12);
        assert!((out[8] - path[6]).abs() < 1e-12);
    }

    #[test]
    fn coarse_parents_partition_the_fine_buckets() {
        let times = grid(4);
        let n = 64;
        let mut states = Vec::new();
        let mut noise = Vec::new();
        let mut rng = crate::rng::CounterRng::new(3, crate::rng::Purpose::CommonNoise, 0, 0);
        for _ in 0..n {
            let mut w = 0.0;
            for j in 0..times.len() {
                if j > 0 {
                    w += 0.5 * rng.normal();
                }
                noise.push(w);
                states.push(w);
            }
        }
        let mut ens = ParticleEnsemble::from_states(times, 1, states).unwrap();
        ens.noise_dim = 1;
        ens.noise0 = Some(noise);
        let fine = build_partition(2, 1, 1.0).unwrap();
        let coarse = build_partition(1, 1, 1.0).unwrap();
        let tree = coarsen_counts(&ens, &fine, &coarse).unwrap();
        let total: usize = tree.values().flat_map(|m| m.values()).sum();
        assert_eq!(total, n);
        let map = conditional_buckets(&ens, &coarse).unwrap();
        assert_eq!(map.total_count(), n);
        for (code, children) in &tree {
            assert_eq!(map.buckets[code].len(), children.values().sum::<usize>());
        }
    }

    proptest! {
        #[test]
        fn w1_symmetric_and_shift_equivariant(
            xs in proptest::collection::vec(-5.0..5.0f64, 1..20),
            ys in proptest::collection::vec(-5.0..5.0f64, 1..20),
            c in -3.0..3.0f64,
        ) {
            let wa = 1.0 / xs.len() as f64;
            let wb = 1.0 / ys.len() as f64;
            let a: Vec<_> = xs.iter().map(|&x| (x, wa)).collect();
            let b: Vec<_> = ys.iter().map(|&y| (y, wb)).collect();
            let d = weighted_w1(a.clone(), b.clone());
            prop_assert!((d - weighted_w1(b.clone(), a.clone())).abs() < 1e-9);
            let sa: Vec<_> = a.iter().map(|&(x, w)| (x + c, w)).collect();
            let sb: Vec<_> = b.iter().map(|&(y, w)| (y + c, w)).collect();
            prop_assert!((d - weighted_w1(sa, sb)).abs() < 1e-9);
        }

        #[test]
        fn interpolation_is_adapted(
            path in proptest::collection::vec(-3.0..3.0f64, 17),
            cut in 0usize..16,
            bump in -2.0..2.0f64,
            level in 1u32..5,
        ) {
            let times = grid(16);
            let base = adapted_interpolate(&path, &times, 1, level, &times).unwrap();
            let mut moved = path.clone();
            for v in moved.iter_mut().skip(cut + 1) {
                *v += bump;
            }
            let pert = adapted_interpolate(&moved, &times, 1, level, &times).unwrap();
            for j in 0..=cut {
                prop_assert_eq!(base[j], pert[j]);
            }
        }
    }
}
