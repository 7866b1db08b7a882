//! Least-squares Monte Carlo for the BSDE under a fixed diffusion law.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::feedback::DiffusionSelection;
use super::simulate::simulate_selection;
use crate::error::{Error, Result};
use crate::hamiltonian::PointTables;
use crate::measures::ParticleEnsemble;
use crate::model::{MeasureSummary, ModelSpec};

/// Polynomials in each standardized coordinate up to `degree`, optionally with
/// pairwise products, solved with ridge-damped normal equations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionBasis {
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_cross")]
    pub cross_terms: bool,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn default_degree() -> usize {
    3
}
fn default_cross() -> bool {
    true
}
fn default_ridge() -> f64 {
    1e-8
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self { degree: default_degree(), cross_terms: default_cross(), ridge: default_ridge() }
    }
}

/// Per-step centering and scaling; coordinates with no spread only enter the constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub active: Vec<bool>,
}

impl Standardization {
    fn of(points: &[&[f64]], weights: &[f64], d: usize) -> Self {
        let mut mean = vec![0.0; d];
        for (x, w) in points.iter().zip(weights) {
            for k in 0..d {
                mean[k] += w * x[k];
            }
        }
        let mut var = vec![0.0; d];
        for (x, w) in points.iter().zip(weights) {
            for k in 0..d {
                var[k] += w * (x[k] - mean[k]).powi(2);
            }
        }
        let scale: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        let active = scale.iter().zip(&mean).map(|(s, m)| *s > 1e-12 * (1.0 + m.abs())).collect();
        Self { mean, scale, active }
    }
}

impl RegressionBasis {
    fn features(&self, st: &Standardization, x: &[f64]) -> Vec<f64> {
        let u: Vec<Option<f64>> = (0..x.len())
            .map(|k| st.active[k].then(|| (x[k] - st.mean[k]) / st.scale[k]))
            .collect();
        let mut out = vec![1.0];
        for uk in u.iter().flatten() {
            let mut p = 1.0;
            for _ in 0..self.degree {
                p *= uk;
                out.push(p);
            }
        }
        if self.cross_terms && self.degree >= 2 {
            for k in 0..u.len() {
                for l in k + 1..u.len() {
                    if let (Some(a), Some(b)) = (u[k], u[l]) {
                        out.push(a * b);
                    }
                }
            }
        }
        out
    }
}

/// Regressed gradient per step, reusable as a feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub basis: RegressionBasis,
    pub dim: usize,
    pub standardization: Vec<Standardization>,
    /// `features x d` per step.
    pub z_coeffs: Vec<Vec<f64>>,
}

impl RegressionFit {
    pub fn gradient(&self, j: usize, x: &[f64]) -> Vec<f64> {
        let j = j.min(self.z_coeffs.len() - 1);
        let phi = self.basis.features(&self.standardization[j], x);
        let d = self.dim;
        (0..d).map(|k| phi.iter().enumerate().map(|(r, p)| p * self.z_coeffs[j][r * d + k]).sum()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedMeasureBsdeResult {
    pub y0: f64,
    /// Standard error of `y0` from the spread of the pathwise targets.
    pub y0_se: f64,
    /// Flat `N x (L+1)`.
    pub y: Vec<f64>,
    /// Flat `N x L x d`.
    pub z: Vec<f64>,
    /// Orthogonal residual increments, flat `N x L`.
    pub residuals: Vec<f64>,
    /// Applied covariance per path and step, flat `N x L x d x d`.
    pub sigma_hat: Vec<f64>,
    pub fit: RegressionFit,
}

/// Weighted least squares of each column of `targets` (N x c) on `phi` (N x K).
fn regress(phi: &DMatrix<f64>, w: &[f64], targets: &DMatrix<f64>, ridge: f64, step: usize) -> Result<DMatrix<f64>> {
    let k = phi.ncols();
    let mut weighted = phi.clone();
    for (i, &wi) in w.iter().enumerate() {
        weighted.row_mut(i).scale_mut(wi);
    }
    let mut gram = phi.transpose() * &weighted;
    let rhs = weighted.transpose() * targets;
    for r in 0..k {
        gram[(r, r)] += ridge;
    }
    let chol = nalgebra::Cholesky::new(gram).ok_or(Error::SingularRegression { step })?;
    Ok(chol.solve(&rhs))
}

fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 1 {
        let v = m[(0, 0)];
        return DMatrix::from_element(1, 1, if v.abs() > 1e-14 { 1.0 / v } else { 0.0 });
    }
    m.clone().pseudo_inverse(1e-12).unwrap_or_else(|_| DMatrix::zeros(m.nrows(), m.ncols()))
}

/// Backward induction `Y_j = E[Y_{j+1} | X_j] + dt F(X_j, Z_j, sigma_hat_j, m)`.
pub fn solve_bsde_fixed_measure(
    spec: &ModelSpec,
    m: &MeasureSummary,
    ens: &ParticleEnsemble,
    basis: &RegressionBasis,
) -> Result<FixedMeasureBsdeResult> {
    let applied = ens
        .applied_cov
        .as_ref()
        .ok_or_else(|| Error::InvalidModel("ensemble carries no applied covariance".into()))?;
    let (n, l, d) = (ens.n_particles, ens.steps(), ens.dim);
    if d != spec.dim_state {
        return Err(Error::GridMismatch("ensemble dimension differs from the model".into()));
    }
    let w = &ens.weights;
    let mut y = vec![0.0; n * (l + 1)];
    let mut z = vec![0.0; n * l * d];
    let mut residuals = vec![0.0; n * l];
    for i in 0..n {
        y[i * (l + 1) + l] = spec.terminal(ens.state(i, l));
    }
    let mut standardization = vec![Standardization { mean: vec![], scale: vec![], active: vec![] }; l];
    let mut z_coeffs = vec![Vec::new(); l];
    // pathwise xi + sum dt F, whose mean is y0 by the tower property
    let mut pathwise: Vec<f64> = (0..n).map(|i| y[i * (l + 1) + l]).collect();
    for j in (0..l).rev() {
        let (t, dt) = (ens.times[j], ens.times[j + 1] - ens.times[j]);
        let points: Vec<&[f64]> = (0..n).map(|i| ens.state(i, j)).collect();
        let st = Standardization::of(&points, w, d);
        let rows: Vec<Vec<f64>> = points.iter().map(|x| basis.features(&st, x)).collect();
        let k = rows[0].len();
        let phi = DMatrix::from_fn(n, k, |i, c| rows[i][c]);
        let dx = DMatrix::from_fn(n, d, |i, c| ens.state(i, j + 1)[c] - ens.state(i, j)[c]);
        let drift_coef = regress(&phi, w, &dx, basis.ridge, j)?;
        let dxc = &dx - &phi * &drift_coef;
        let next = DMatrix::from_fn(n, 1, |i, _| y[i * (l + 1) + j + 1]);
        let cmean = &phi * regress(&phi, w, &next, basis.ridge, j)?;
        let zraw = DMatrix::from_fn(n, d, |i, c| next[(i, 0)] * dxc[(i, c)]);
        let mut znorm = DMatrix::zeros(n, d);
        for i in 0..n {
            let base = (i * l + j) * d * d;
            let cov = DMatrix::from_row_slice(d, d, &applied[base..base + d * d]) * dt;
            let zi = pinv(&cov) * zraw.row(i).transpose();
            znorm.set_row(i, &zi.transpose());
        }
        let zc = regress(&phi, w, &znorm, basis.ridge, j)?;
        let zfit = &phi * &zc;
        let drivers: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = ens.state(i, j);
                let base = (i * l + j) * d * d;
                let target = DMatrix::from_row_slice(d, d, &applied[base..base + d * d]);
                let zi: Vec<f64> = zfit.row(i).iter().copied().collect();
                PointTables::new(spec, t, x, m).driver(&zi, &target).map(|e| e.value)
            })
            .collect::<Result<Vec<_>>>()?;
        for i in 0..n {
            y[i * (l + 1) + j] = cmean[(i, 0)] + dt * drivers[i];
            let mut zdx = 0.0;
            for c in 0..d {
                z[(i * l + j) * d + c] = zfit[(i, c)];
                zdx += zfit[(i, c)] * dxc[(i, c)];
            }
            residuals[i * l + j] = next[(i, 0)] - cmean[(i, 0)] - zdx;
            pathwise[i] += dt * drivers[i];
        }
        standardization[j] = st;
        z_coeffs[j] = zc.transpose().as_slice().to_vec();
    }
    let y0: f64 = (0..n).map(|i| w[i] * y[i * (l + 1)]).sum();
    let mu: f64 = pathwise.iter().zip(w).map(|(v, wi)| v * wi).sum();
    let var: f64 = pathwise.iter().zip(w).map(|(v, wi)| wi * (v - mu).powi(2)).sum();
    let y0_se = (var / n as f64).sqrt();
    Ok(FixedMeasureBsdeResult {
        y0,
        y0_se,
        y,
        z,
        residuals,
        sigma_hat: applied.clone(),
        fit: RegressionFit { basis: basis.clone(), dim: d, standardization, z_coeffs },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberValue {
    pub selection: DiffusionSelection,
    pub y0: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupResult {
    pub y0_sup: f64,
    pub best: usize,
    pub members: Vec<MemberValue>,
}

/// Largest BSDE value over a finite family of zero-drift diffusion laws.
/// Members share the seed, so they are driven by the same Gaussian draws.
pub fn sup_over_measures(
    spec: &ModelSpec,
    m: &MeasureSummary,
    family: &[DiffusionSelection],
    n: usize,
    seed: u64,
    basis: &RegressionBasis,
) -> Result<SupResult> {
    if family.is_empty() {
        return Err(Error::InvalidModel("the family of diffusion laws is empty".into()));
    }
    if spec.common_noise_dim > 0 {
        return Err(Error::InvalidModel("the family estimator is for models without common noise".into()));
    }
    let mut members = Vec::with_capacity(family.len());
    let mut best = 0;
    for (k, sel) in family.iter().enumerate() {
        let ens = simulate_selection(spec, sel, m, n, seed, None)?;
        let res = solve_bsde_fixed_measure(spec, m, &ens, basis)?;
        if res.y0 > members.get(best).map_or(f64::NEG_INFINITY, |b: &MemberValue| b.y0) {
            best = k;
        }
        members.push(MemberValue { selection: sel.clone(), y0: res.y0, se: res.y0_se });
    }
    Ok(SupResult { y0_sup: members[best].y0, best, members })
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
    fn brownian_quadratic_value_and_gradient() {
        let spec = quadratic_terminal(&[0.0], &[1.0]);
        let m = frozen(&spec, 20);
        let ens = simulate_selection(&spec, &DiffusionSelection::Constant(0), &m, 4000, 2, None).unwrap();
        let res = solve_bsde_fixed_measure(&spec, &m, &ens, &RegressionBasis::default()).unwrap();
        // V(0, 1) = -(1 + 1), dV/dx = -2
        assert!((res.y0 + 2.0).abs() < 4.0 * res.y0_se + 1e-2, "y0 {} se {}", res.y0, res.y0_se);
        // about 4 SE of the regressed gradient at this sample size
        assert!((res.fit.gradient(0, &[1.0])[0] + 2.0).abs() < 0.6);
        assert!(res.fit.gradient(10, &[0.0])[0].abs() < 0.6);
    }

    #[test]
    fn family_sup_picks_the_low_volatility() {
        let spec = quadratic_terminal(&[0.0], &[0.5, 1.0]);
        let m = frozen(&spec, 20);
        let family = [DiffusionSelection::Constant(0), DiffusionSelection::Constant(1)];
        let sup = sup_over_measures(&spec, &m, &family, 2000, 3, &RegressionBasis::default()).unwrap();
        assert_eq!(sup.best, 0);
        assert!((sup.y0_sup + 1.25).abs() < 4.0 * sup.members[0].se + 1e-2);
        assert!(sup_over_measures(&spec, &m, &[], 10, 3, &RegressionBasis::default()).is_err());
    }
}
