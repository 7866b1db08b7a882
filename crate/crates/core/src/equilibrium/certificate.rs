//! Supermartingale and martingale checks on `U` along simulated paths.
//!
//! With the value field `Y` and gradient `Z`, each step contributes
//! `dU = dY + F(X, Z, sigma_hat^2, m) dt - Z dX`. Under any admissible law `U` is
//! a supermartingale; under the equilibrium law it is a martingale.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{rollout_value, EquilibriumResult};
use crate::bestresponse::{simulate_forward, simulate_selection, DiffusionSelection, FeedbackControl, ValueField};
use crate::error::{Error, Result};
use crate::hamiltonian::PointTables;
use crate::measures::ParticleEnsemble;
use crate::model::ModelSpec;
use crate::rng::derive_seed;

/// Number of standard errors in every check.
pub const CHECK_SE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawIncrements {
    pub label: String,
    /// Per-step mean of `dU`.
    pub means: Vec<f64>,
    pub ses: Vec<f64>,
    /// Largest `mean / se` over the steps.
    pub max_z: f64,
    /// Share of steps with `mean < -3 se`.
    pub strict_fraction: f64,
}

impl LawIncrements {
    pub fn supermartingale_ok(&self) -> bool {
        self.means.iter().zip(&self.ses).all(|(m, s)| *m <= CHECK_SE * s)
    }

    pub fn martingale_ok(&self) -> bool {
        self.means.iter().zip(&self.ses).all(|(m, s)| m.abs() <= CHECK_SE * s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub equilibrium: LawIncrements,
    pub u_increment_means: Vec<LawIncrements>,
    /// `max |mean dU| / se` under the equilibrium law.
    pub m_martingale_pvalue_proxy: f64,
    pub y0: f64,
    pub rollout_value: f64,
    pub rollout_se: f64,
    pub y0_vs_value_gap: f64,
    pub martingale_ok: bool,
    pub supermartingale_ok: bool,
}

fn increments(spec: &ModelSpec, vf: &ValueField, ens: &ParticleEnsemble, label: &str) -> Result<LawIncrements> {
    let (n, l) = (ens.n_particles, ens.steps());
    let covs = ens.applied_cov.as_ref().ok_or_else(|| Error::InvalidModel("ensemble lacks applied covariance".into()))?;
    let m = &vf.measure;
    let per_path: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(l);
            for j in 0..l {
                let (x, x1) = (ens.state(i, j)[0], ens.state(i, j + 1)[0]);
                let (t, dt) = (vf.times[j], vf.times[j + 1] - vf.times[j]);
                let z = vf.gradient_at(j, x);
                let target = nalgebra::DMatrix::from_element(1, 1, covs[i * l + j]);
                let f = PointTables::new(spec, t, &[x], m).driver(&[z], &target)?.value;
                out.push(vf.value_at(j + 1, x1) - vf.value_at(j, x) + f * dt - z * (x1 - x));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut means = vec![0.0; l];
    let mut ses = vec![0.0; l];
    for j in 0..l {
        let mean = per_path.iter().map(|p| p[j]).sum::<f64>() / n as f64;
        let var = per_path.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
        means[j] = mean;
        ses[j] = (var / n as f64).sqrt();
    }
    let max_z = means.iter().zip(&ses).map(|(m, s)| if *s > 0.0 { m / s } else { 0.0 }).fold(f64::NEG_INFINITY, f64::max);
    let strict = means.iter().zip(&ses).filter(|(m, s)| **m < -CHECK_SE * **s).count();
    Ok(LawIncrements {
        label: label.to_string(),
        means,
        ses,
        max_z,
        strict_fraction: strict as f64 / l as f64,
    })
}

/// `dU` statistics under the value field's own feedback and under zero-drift
/// test laws, all against the measure the value field was solved for.
pub fn mkv2bsde_certificate(
    spec: &ModelSpec,
    eq: &EquilibriumResult,
    test_laws: &[DiffusionSelection],
    n: usize,
    seed: u64,
) -> Result<CertificateReport> {
    let vf = eq
        .value_field
        .as_ref()
        .ok_or_else(|| Error::IncompatibleGrid("the certificate needs a grid value field".into()))?;
    if spec.dim_state != 1 || spec.common_noise_dim > 0 {
        return Err(Error::IncompatibleGrid("the certificate handles one-dimensional models without common noise".into()));
    }
    let m = &vf.measure;
    let control = FeedbackControl::Pointwise { spec: Arc::new(spec.clone()), field: Arc::new(vf.clone()) };
    let eq_ens = simulate_forward(spec, &control, m, n, derive_seed(seed, 0), None)?;
    let equilibrium = increments(spec, vf, &eq_ens, "equilibrium")?;
    let mut laws = Vec::with_capacity(test_laws.len());
    for (k, sel) in test_laws.iter().enumerate() {
        let ens = simulate_selection(spec, sel, m, n, derive_seed(seed, 1 + k as u64), None)?;
        laws.push(increments(spec, vf, &ens, &format!("{sel:?}"))?);
    }
    let proxy = equilibrium
        .means
        .iter()
        .zip(&equilibrium.ses)
        .map(|(m, s)| if *s > 0.0 { m.abs() / s } else { 0.0 })
        .fold(0.0, f64::max);
    let (rollout, rollout_se) = rollout_value(&eq_ens, spec);
    let y0 = vf.y0(spec.x0[0]);
    Ok(CertificateReport {
        martingale_ok: equilibrium.martingale_ok(),
        supermartingale_ok: laws.iter().all(|l| l.supermartingale_ok()),
        equilibrium,
        u_increment_means: laws,
        m_martingale_pvalue_proxy: proxy,
        y0,
        rollout_value: rollout,
        rollout_se,
        y0_vs_value_gap: (y0 - rollout).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bestresponse::{Scheme, SpaceGrid};
    use crate::equilibrium::{solve_mfg_no_common, BestResponseMethod, Coupling, SolverParams};
    use crate::testing::quadratic_terminal;

    #[test]
    fn quadratic_model_certificate() {
        // value -(x^2 + 0.25 (T - t)); sigma = 1 loses 0.75 dt per step in expectation
        let spec = quadratic_terminal(&[0.0], &[0.5, 1.0]);
        let p = SolverParams {
            time_steps: 20,
            particles: 500,
            seed: 2,
            best_response: BestResponseMethod::Hjb { grid: SpaceGrid::new(-4.0, 6.0, 51).unwrap(), scheme: Scheme::Explicit },
            beta: 1.0,
            max_iter: 3,
            tol: 0.1,
            bins: 10,
            min_bucket: 50,
            coupling: Coupling::Conditional,
            exploitability_particles: None,
            certificate: None,
        };
        let eq = solve_mfg_no_common(&spec, &p).unwrap();
        let laws = [DiffusionSelection::Mixed(vec![0.5, 0.5]), DiffusionSelection::Constant(1)];
        let c = mkv2bsde_certificate(&spec, &eq, &laws, 4000, 9).unwrap();
        assert!(c.martingale_ok, "{:?}", c.equilibrium);
        assert!(c.supermartingale_ok);
        assert_eq!(c.u_increment_means[1].strict_fraction, 1.0);
        for (m, s) in c.u_increment_means[1].means.iter().zip(&c.u_increment_means[1].ses) {
            assert!((m + 0.75 * 0.05).abs() < 4.0 * s, "{m} {s}");
        }
        assert!((c.y0 + 1.0 + 0.25).abs() < 1e-9);
    }
}
