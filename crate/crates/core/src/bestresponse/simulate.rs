//! Euler simulation matching the relaxed generator.
//!
//! On each step every particle draws one drift action from `qa` and one
//! diffusion action from `qb`, so the conditional drift and covariance of an
//! increment are the strategy averages of `sigma lambda` and `sigma sigma^T`.

use std::borrow::Cow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::feedback::{DiffusionSelection, FeedbackControl};
use crate::error::{Error, Result};
use crate::hamiltonian::MixedStrategy;
use crate::measures::ParticleEnsemble;
use crate::model::{MeasureSummary, ModelSpec};
use crate::rng::{CounterRng, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommonNoiseMode {
    /// One common path for the whole population.
    Shared,
    /// An independent common path per particle, so the ensemble samples the
    /// joint law of the common noise and the state.
    PerParticle,
}

/// Strategy and measure seen by each particle.
pub trait Policy: Sync {
    fn strategy(&self, particle: usize, step: usize, t: f64, x: &[f64]) -> Result<Cow<'_, MixedStrategy>>;
    fn measure(&self, particle: usize) -> &MeasureSummary;
    /// Drop the drift, keeping only the diffusion choice.
    fn zero_drift(&self) -> bool {
        false
    }
}

struct ControlPolicy<'a> {
    ctrl: &'a FeedbackControl,
    m: &'a MeasureSummary,
}

impl Policy for ControlPolicy<'_> {
    fn strategy(&self, _particle: usize, step: usize, t: f64, x: &[f64]) -> Result<Cow<'_, MixedStrategy>> {
        self.ctrl.strategy(step, t, x)
    }
    fn measure(&self, _particle: usize) -> &MeasureSummary {
        self.m
    }
}

struct SelectionPolicy<'a> {
    selection: &'a DiffusionSelection,
    m: &'a MeasureSummary,
    ka: usize,
    kb: usize,
}

impl Policy for SelectionPolicy<'_> {
    fn strategy(&self, _particle: usize, _step: usize, _t: f64, x: &[f64]) -> Result<Cow<'_, MixedStrategy>> {
        let mut qa = vec![0.0; self.ka];
        qa[0] = 1.0;
        Ok(Cow::Owned(MixedStrategy { qa, qb: self.selection.qb(x, self.kb)? }))
    }
    fn measure(&self, _particle: usize) -> &MeasureSummary {
        self.m
    }
    fn zero_drift(&self) -> bool {
        true
    }
}

/// Common-noise increments, flat `N x L x p0`.
pub fn draw_common_noise(seed: u64, n: usize, times: &[f64], p0: usize, mode: CommonNoiseMode) -> Vec<f64> {
    let l = times.len() - 1;
    let mut out = vec![0.0; n * l * p0];
    for i in 0..n {
        let stream = match mode {
            CommonNoiseMode::Shared => 0,
            CommonNoiseMode::PerParticle => i as u64,
        };
        for j in 0..l {
            let sq = (times[j + 1] - times[j]).sqrt();
            let mut rng = CounterRng::new(seed, Purpose::CommonNoise, stream, j as u64);
            for k in 0..p0 {
                out[(i * l + j) * p0 + k] = sq * rng.normal();
            }
        }
    }
    out
}

struct PathRecord {
    states: Vec<f64>,
    covs: Vec<f64>,
    reward: f64,
}

/// Simulates `n` particles on `times` under a per-particle policy.
///
/// `common` holds common-noise increments from [`draw_common_noise`] and is
/// required exactly when the model has common-noise columns.
pub fn simulate_policy(
    spec: &ModelSpec,
    policy: &dyn Policy,
    times: &[f64],
    n: usize,
    seed: u64,
    common: Option<&[f64]>,
) -> Result<ParticleEnsemble> {
    if n == 0 {
        return Err(Error::InvalidModel("need at least one particle".into()));
    }
    let (d, p, p0, l) = (spec.dim_state, spec.noise_dim, spec.common_noise_dim, times.len() - 1);
    match (p0, common) {
        (0, Some(_)) => return Err(Error::InvalidModel("model has no common-noise columns".into())),
        (_, None) if p0 > 0 => return Err(Error::MissingCommonNoise),
        (_, Some(w)) if w.len() != n * l * p0 => {
            return Err(Error::GridMismatch("common-noise increments do not match N x L x p0".into()))
        }
        _ => {}
    }
    let p1 = p - p0;
    let zero_drift = policy.zero_drift();
    let records: Vec<PathRecord> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<PathRecord> {
            let m = policy.measure(i);
            let mut states = Vec::with_capacity((l + 1) * d);
            let mut covs = Vec::with_capacity(l * d * d);
            states.extend_from_slice(&spec.x0);
            let mut x = spec.x0.clone();
            let mut reward = 0.0;
            let mut dw = vec![0.0; p];
            for j in 0..l {
                let (t, dt) = (times[j], times[j + 1] - times[j]);
                let q = policy.strategy(i, j, t, &x)?;
                let mut draw = CounterRng::new(seed, Purpose::ActionDraw, i as u64, j as u64);
                let a = draw.categorical(&q.qa);
                let b = draw.categorical(&q.qb);
                let mut noise = CounterRng::new(seed, Purpose::IdiosyncraticNoise, i as u64, j as u64);
                let sq = dt.sqrt();
                for w in dw.iter_mut().take(p1) {
                    *w = sq * noise.normal();
                }
                if let Some(c) = common {
                    dw[p1..].copy_from_slice(&c[(i * l + j) * p0..(i * l + j + 1) * p0]);
                }
                let sigma = spec.sigma(t, &x, m, b);
                reward += dt * spec.cost(t, &x, m, a, b);
                let mut inc = &sigma * nalgebra::DVector::from_column_slice(&dw);
                if !zero_drift {
                    inc += (&sigma * spec.lambda(t, &x, m, a)) * dt;
                }
                let cov = &sigma * sigma.transpose();
                for r in 0..d {
                    for c in 0..d {
                        covs.push(0.5 * (cov[(r, c)] + cov[(c, r)]));
                    }
                }
                for (xk, ik) in x.iter_mut().zip(inc.iter()) {
                    *xk += ik;
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteCoefficient {
                        name: "state".into(),
                        location: format!("particle {i}, t={}", times[j + 1]),
                    });
                }
                states.extend_from_slice(&x);
            }
            Ok(PathRecord { states, covs, reward })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut states = Vec::with_capacity(n * (l + 1) * d);
    let mut covs = Vec::with_capacity(n * l * d * d);
    let mut rewards = Vec::with_capacity(n);
    for r in records {
        states.extend(r.states);
        covs.extend(r.covs);
        rewards.push(r.reward);
    }
    let noise0 = common.map(|c| {
        let mut cum = Vec::with_capacity(n * (l + 1) * p0);
        for i in 0..n {
            let mut w = vec![0.0; p0];
            cum.extend_from_slice(&w);
            for j in 0..l {
                for k in 0..p0 {
                    w[k] += c[(i * l + j) * p0 + k];
                }
                cum.extend_from_slice(&w);
            }
        }
        cum
    });
    let mut ens = ParticleEnsemble::from_states(times.to_vec(), d, states)?;
    if let Some(w) = noise0 {
        ens.noise_dim = p0;
        ens.noise0 = Some(w);
    }
    ens.applied_cov = Some(covs);
    ens.running_reward = Some(rewards);
    Ok(ens)
}

/// Simulates a feedback control against a frozen measure on the measure's time grid.
pub fn simulate_forward(
    spec: &ModelSpec,
    ctrl: &FeedbackControl,
    m: &MeasureSummary,
    n: usize,
    seed: u64,
    common: Option<CommonNoiseMode>,
) -> Result<ParticleEnsemble> {
    let increments = common.map(|mode| draw_common_noise(seed, n, &m.times, spec.common_noise_dim, mode));
    simulate_policy(spec, &ControlPolicy { ctrl, m }, &m.times, n, seed, increments.as_deref())
}

/// Zero-drift simulation under a diffusion selection.
pub fn simulate_selection(
    spec: &ModelSpec,
    selection: &DiffusionSelection,
    m: &MeasureSummary,
    n: usize,
    seed: u64,
    common: Option<CommonNoiseMode>,
) -> Result<ParticleEnsemble> {
    let policy = SelectionPolicy { selection, m, ka: spec.ka(), kb: spec.kb() };
    let increments = common.map(|mode| draw_common_noise(seed, n, &m.times, spec.common_noise_dim, mode));
    simulate_policy(spec, &policy, &m.times, n, seed, increments.as_deref())
}
