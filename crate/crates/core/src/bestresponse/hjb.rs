//! Finite-difference HJB solver for one-dimensional states.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{MixedStrategy, PointTables};
use crate::model::{MeasureSummary, ModelSpec};

/// Uniform grid `lo, lo + dx, ..., hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl SpaceGrid {
    pub fn new(lo: f64, hi: f64, points: usize) -> Result<Self> {
        let g = Self { lo, hi, points };
        g.check()?;
        Ok(g)
    }

    pub fn check(&self) -> Result<()> {
        if self.points < 4 {
            return Err(Error::GridTooSmall(format!("{} space points, need at least 4", self.points)));
        }
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::GridTooSmall(format!("empty interval [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.dx()
    }

    pub fn nearest(&self, x: f64) -> usize {
        let r = ((x - self.lo) / self.dx()).round();
        r.clamp(0.0, (self.points - 1) as f64) as usize
    }

    /// Left node of the three-point stencil used to interpolate at `x`.
    fn stencil(&self, x: f64) -> usize {
        self.nearest(x).clamp(1, self.points - 2) - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    Explicit,
    /// Policy from the explicit Hamiltonian, then a linearly implicit step.
    ImplicitDrift,
}

/// Value, gradient and maximizing pure action per grid node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueField {
    pub times: Vec<f64>,
    pub grid: SpaceGrid,
    /// `values[j][i]` at `(times[j], grid.x(i))`.
    pub values: Vec<Vec<f64>>,
    /// Central difference of `values[j + 1]` (of `values[j]` on the last slice).
    pub gradients: Vec<Vec<f64>>,
    /// Maximizing `(a, b)` of the step out of `times[j]`; the last slice repeats the previous one.
    pub argmax: Vec<Vec<(usize, usize)>>,
    pub ka: usize,
    pub kb: usize,
    /// Measure the field was solved against.
    pub measure: MeasureSummary,
}

fn quad_weights(u: f64) -> [f64; 3] {
    // Lagrange basis on nodes 0, 1, 2 at offset u (in units of dx)
    [0.5 * (u - 1.0) * (u - 2.0), -u * (u - 2.0), 0.5 * u * (u - 1.0)]
}

fn quad_slope(u: f64) -> [f64; 3] {
    [u - 1.5, 2.0 - 2.0 * u, u - 0.5]
}

impl ValueField {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn y0(&self, x0: f64) -> f64 {
        self.value_at(0, x0)
    }

    /// Quadratic interpolation of slice `j` at `x`.
    pub fn value_at(&self, j: usize, x: f64) -> f64 {
        let l = self.grid.stencil(x);
        let u = (x - self.grid.x(l)) / self.grid.dx();
        let w = quad_weights(u);
        let v = &self.values[j];
        w[0] * v[l] + w[1] * v[l + 1] + w[2] * v[l + 2]
    }

    /// Gradient used by the step out of `times[j]`: slope of the quadratic
    /// interpolant of slice `j + 1`.
    pub fn gradient_at(&self, j: usize, x: f64) -> f64 {
        let src = (j + 1).min(self.steps());
        let l = self.grid.stencil(x);
        let u = (x - self.grid.x(l)) / self.grid.dx();
        let w = quad_slope(u);
        let v = &self.values[src];
        (w[0] * v[l] + w[1] * v[l + 1] + w[2] * v[l + 2]) / self.grid.dx()
    }

    pub fn strategy_at(&self, j: usize, i: usize) -> MixedStrategy {
        let (a, b) = self.argmax[j][i];
        MixedStrategy::dirac(a, b, self.ka, self.kb)
    }
}

struct NodeChoice {
    value: f64,
    pair: (usize, usize),
    rate: f64,
}

/// Generator of the scheme at an interior node: central drift where it keeps the
/// stencil monotone, upwind otherwise.
fn best_pair(tables: &PointTables, v: &[f64], i: usize, dx: f64) -> NodeChoice {
    let d1c = (v[i + 1] - v[i - 1]) / (2.0 * dx);
    let d1f = (v[i + 1] - v[i]) / dx;
    let d1b = (v[i] - v[i - 1]) / dx;
    let d2 = (v[i + 1] - 2.0 * v[i] + v[i - 1]) / (dx * dx);
    let mut best: Option<NodeChoice> = None;
    for a in 0..tables.ka {
        for b in 0..tables.kb {
            let mu = tables.drift_at(a, b)[0];
            let s2 = tables.covs[b][(0, 0)];
            let (d1, rate) = if mu.abs() * dx <= s2 {
                (d1c, s2 / (dx * dx))
            } else if mu > 0.0 {
                (d1f, s2 / (dx * dx) + mu / dx)
            } else {
                (d1b, s2 / (dx * dx) - mu / dx)
            };
            let val = mu * d1 + 0.5 * s2 * d2 + tables.cost[a * tables.kb + b];
            if best.as_ref().is_none_or(|c| val > c.value) {
                best = Some(NodeChoice { value: val, pair: (a, b), rate });
            }
        }
    }
    best.expect("action grids are nonempty")
}

fn extrapolate_ends(v: &mut [f64]) {
    let n = v.len();
    v[0] = 3.0 * v[1] - 3.0 * v[2] + v[3];
    v[n - 1] = 3.0 * v[n - 2] - 3.0 * v[n - 3] + v[n - 4];
}

fn central_gradient(v: &[f64], dx: f64) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| {
            if i == 0 {
                (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * dx)
            } else if i == n - 1 {
                (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / (2.0 * dx)
            } else {
                (v[i + 1] - v[i - 1]) / (2.0 * dx)
            }
        })
        .collect()
}

/// Thomas algorithm for `lower[i] u[i-1] + diag[i] u[i] + upper[i] u[i+1] = rhs[i]`.
fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let den = diag[i] - lower[i] * c[i - 1];
        c[i] = if i + 1 < n { upper[i] / den } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / den;
    }
    let mut u = vec![0.0; n];
    u[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        u[i] = d[i] - c[i] * u[i + 1];
    }
    u
}

/// Backward sweep on the time grid of `m`.
pub fn solve_hjb_grid(spec: &ModelSpec, m: &MeasureSummary, grid: &SpaceGrid, scheme: Scheme) -> Result<ValueField> {
    if spec.dim_state != 1 {
        return Err(Error::IncompatibleGrid(format!(
            "the grid solver handles one-dimensional states, got {}",
            spec.dim_state
        )));
    }
    grid.check()?;
    let times = m.times.clone();
    if times.len() < 2 {
        return Err(Error::GridTooSmall("need at least one time step".into()));
    }
    let (n, l, dx) = (grid.points, times.len() - 1, grid.dx());
    let mut values = vec![Vec::new(); l + 1];
    let mut gradients = vec![Vec::new(); l + 1];
    let mut argmax = vec![vec![(0, 0); n]; l + 1];
    values[l] = (0..n).map(|i| spec.terminal(&[grid.x(i)])).collect();
    for j in (0..l).rev() {
        let (t, dt) = (times[j], times[j + 1] - times[j]);
        let next = &values[j + 1];
        let mut cur = vec![0.0; n];
        let mut rates = vec![0.0; n];
        let mut tables_at = Vec::with_capacity(n);
        for i in 1..n - 1 {
            let tables = PointTables::new(spec, t, &[grid.x(i)], m);
            let c = best_pair(&tables, next, i, dx);
            cur[i] = next[i] + dt * c.value;
            rates[i] = c.rate;
            argmax[j][i] = c.pair;
            tables_at.push(tables);
        }
        argmax[j][0] = argmax[j][1];
        argmax[j][n - 1] = argmax[j][n - 2];
        match scheme {
            Scheme::Explicit => {
                let ratio = dt * rates.iter().cloned().fold(0.0, f64::max);
                if ratio > 1.0 + 1e-12 {
                    return Err(Error::CflViolation { ratio });
                }
                extrapolate_ends(&mut cur);
            }
            Scheme::ImplicitDrift => {
                let mut lower = vec![0.0; n];
                let mut diag = vec![1.0; n];
                let mut upper = vec![0.0; n];
                let mut rhs = vec![0.0; n];
                for i in 1..n - 1 {
                    let tables = &tables_at[i - 1];
                    let (a, b) = argmax[j][i];
                    let mu = tables.drift_at(a, b)[0];
                    let s2 = tables.covs[b][(0, 0)];
                    let diff = 0.5 * s2 / (dx * dx);
                    // central where it stays monotone, upwind otherwise
                    let (up, down) = if mu.abs() * dx <= s2 {
                        (0.5 * mu / dx, -0.5 * mu / dx)
                    } else {
                        (mu.max(0.0) / dx, (-mu).max(0.0) / dx)
                    };
                    lower[i] = -dt * (diff + down);
                    upper[i] = -dt * (diff + up);
                    diag[i] = 1.0 + dt * (2.0 * diff + up + down);
                    rhs[i] = next[i] + dt * tables.cost[a * tables.kb + b];
                }
                // keep the boundary slopes of the later slice
                upper[0] = -1.0;
                rhs[0] = next[0] - next[1];
                lower[n - 1] = -1.0;
                rhs[n - 1] = next[n - 1] - next[n - 2];
                cur = solve_tridiagonal(&lower, &diag, &upper, &rhs);
            }
        }
        if let Some(i) = cur.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCoefficient {
                name: "value".into(),
                location: format!("t={t}, x={}", grid.x(i)),
            });
        }
        gradients[j] = central_gradient(next, dx);
        values[j] = cur;
    }
    gradients[l] = central_gradient(&values[l], dx);
    argmax[l] = argmax[l - 1].clone();
    Ok(ValueField {
        times,
        grid: grid.clone(),
        values,
        gradients,
        argmax,
        ka: spec.ka(),
        kb: spec.kb(),
        measure: m.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::quadratic_terminal;

    fn frozen(spec: &ModelSpec, steps: usize) -> MeasureSummary {
        let times: Vec<f64> = (0..=steps).map(|j| spec.horizon * j as f64 / steps as f64).collect();
        MeasureSummary::dirac(&times, &spec.x0)
    }

    #[test]
    fn grid_needs_four_points() {
        assert!(matches!(SpaceGrid::new(0.0, 1.0, 3), Err(Error::GridTooSmall(_))));
        assert!(matches!(SpaceGrid::new(1.0, 1.0, 10), Err(Error::GridTooSmall(_))));
        let g = SpaceGrid::new(-1.0, 1.0, 5).unwrap();
        assert_eq!(g.dx(), 0.5);
        assert_eq!(g.nearest(0.3), 3);
        assert_eq!(g.nearest(-7.0), 0);
    }

    #[test]
    fn heat_equation_is_exact_on_quadratics() {
        let spec = quadratic_terminal(&[0.0], &[1.0]);
        let m = frozen(&spec, 100);
        let vf = solve_hjb_grid(&spec, &m, &SpaceGrid::new(-3.0, 3.0, 31).unwrap(), Scheme::Explicit).unwrap();
        for x in [-1.3, 0.0, 0.45, 2.0] {
            assert!((vf.value_at(0, x) + x * x + 1.0).abs() < 1e-9, "x = {x}");
            assert!((vf.gradient_at(0, x) + 2.0 * x).abs() < 1e-9);
        }
        assert!((vf.y0(1.0) + 2.0).abs() < 1e-9);
    }

    #[test]
    fn implicit_drift_scheme_agrees() {
        let spec = quadratic_terminal(&[-1.0, 0.0, 1.0], &[1.0]);
        let m = frozen(&spec, 100);
        let grid = SpaceGrid::new(-4.0, 4.0, 41).unwrap();
        let ex = solve_hjb_grid(&spec, &m, &grid, Scheme::Explicit).unwrap();
        let im = solve_hjb_grid(&spec, &m, &grid, Scheme::ImplicitDrift).unwrap();
        assert!((ex.y0(1.0) - im.y0(1.0)).abs() < 5e-3, "{} vs {}", ex.y0(1.0), im.y0(1.0));
    }

    #[test]
    fn concave_reward_picks_the_low_volatility() {
        let spec = quadratic_terminal(&[0.0], &[0.5, 1.0]);
        let m = frozen(&spec, 100);
        let vf = solve_hjb_grid(&spec, &m, &SpaceGrid::new(-3.0, 3.0, 31).unwrap(), Scheme::Explicit).unwrap();
        assert!((vf.y0(0.0) + 0.25).abs() < 1e-9);
        assert!(vf.argmax[0].iter().all(|&(_, b)| b == 0));
    }

    #[test]
    fn drift_pushes_toward_the_origin() {
        let spec = quadratic_terminal(&[-1.0, 0.0, 1.0], &[1.0]);
        let m = frozen(&spec, 100);
        let grid = SpaceGrid::new(-3.0, 3.0, 31).unwrap();
        let vf = solve_hjb_grid(&spec, &m, &grid, Scheme::Explicit).unwrap();
        assert_eq!(vf.argmax[0][grid.nearest(1.0)].0, 0);
        assert_eq!(vf.argmax[0][grid.nearest(-1.0)].0, 2);
        // better than doing nothing
        assert!(vf.y0(1.0) > -2.0);
    }

    #[test]
    fn ties_resolve_to_the_first_action() {
        let spec = quadratic_terminal(&[0.0], &[1.0, -1.0]);
        let m = frozen(&spec, 50);
        let vf = solve_hjb_grid(&spec, &m, &SpaceGrid::new(-3.0, 3.0, 31).unwrap(), Scheme::Explicit).unwrap();
        assert!(vf.argmax.iter().flatten().all(|&p| p == (0, 0)));
    }

    #[test]
    fn fine_grid_violates_cfl() {
        let spec = quadratic_terminal(&[0.0], &[1.0]);
        let m = frozen(&spec, 100);
        let err = solve_hjb_grid(&spec, &m, &SpaceGrid::new(-3.0, 3.0, 201).unwrap(), Scheme::Explicit).unwrap_err();
        assert!(matches!(err, Error::CflViolation { ratio } if ratio > 1.0));
    }
}
