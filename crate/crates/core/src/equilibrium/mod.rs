//! Damped fixed-point iteration for the equilibrium measure, with and without
//! common noise, plus exploitability and the 2BSDE certificate.

mod certificate;
mod output;

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};

use crate::bestresponse::{
    extract_feedback, simulate_forward, simulate_policy, simulate_selection, solve_bsde_fixed_measure,
    solve_hjb_grid, draw_common_noise, CommonNoiseMode, DiffusionSelection, FeedbackControl, Policy,
    RegressionBasis, Scheme, SpaceGrid, ValueField,
};
use crate::error::{Error, Result};
use crate::hamiltonian::MixedStrategy;
use crate::measures::{
    build_partition, cell_path, conditional_buckets, measure_distance, summarize, CellPartition, CellPathIndex,
    ParticleEnsemble,
};
use crate::model::{MeasureSummary, ModelSpec};
use crate::rng::derive_seed;

pub use certificate::{mkv2bsde_certificate, CertificateReport, LawIncrements};
pub use output::{load_measure, load_summary, write_result, CertificateFlags, ResultSummary, SCHEMA_VERSION};

/// How the individual problem is solved against a frozen measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BestResponseMethod {
    Hjb {
        grid: SpaceGrid,
        #[serde(default)]
        scheme: Scheme,
    },
    /// Regression BSDE under each member of a family of diffusion laws; the
    /// member with the largest value supplies the feedback.
    Regression {
        #[serde(default)]
        basis: RegressionBasis,
        family: Vec<DiffusionSelection>,
    },
}

/// Which law the coefficients read in common-noise mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Conditional law of the interpolated state given the particle's cell path.
    #[default]
    Conditional,
    /// Pooled law of the state.
    Unconditional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateParams {
    pub particles: usize,
    pub test_laws: Vec<DiffusionSelection>,
}

/// Solver knobs. Damping, iteration budget, histogram resolution and bucket
/// floor have defaults; grids and sample sizes do not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverParams {
    pub time_steps: usize,
    pub particles: usize,
    pub seed: u64,
    pub best_response: BestResponseMethod,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub tol: f64,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_min_bucket")]
    pub min_bucket: usize,
    #[serde(default)]
    pub coupling: Coupling,
    /// Rollout size for exploitability; skipped when absent.
    #[serde(default)]
    pub exploitability_particles: Option<usize>,
    #[serde(default)]
    pub certificate: Option<CertificateParams>,
}

fn default_beta() -> f64 {
    0.5
}
fn default_max_iter() -> usize {
    30
}
fn default_bins() -> usize {
    50
}
fn default_min_bucket() -> usize {
    50
}

impl SolverParams {
    pub fn check(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidModel(format!("damping {} outside (0, 1]", self.beta)));
        }
        if self.time_steps == 0 || self.particles == 0 || self.max_iter == 0 || self.bins == 0 {
            return Err(Error::InvalidModel("time steps, particles, iterations and bins must be positive".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidModel("tolerance must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn times(&self, horizon: f64) -> Vec<f64> {
        (0..=self.time_steps).map(|j| horizon * j as f64 / self.time_steps as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    NoCommon,
    Common { level: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exploitability {
    pub value: f64,
    pub se: f64,
    pub best_response_value: f64,
    pub incumbent_value: f64,
}

/// Conditional laws of one common-noise cell path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSummary {
    pub count: usize,
    /// Law of the interpolated state, read by the coefficients.
    pub interpolated: MeasureSummary,
    /// Law of the state itself.
    pub state: MeasureSummary,
}

#[derive(Debug, Clone)]
pub struct EquilibriumResult {
    pub mode: Mode,
    /// Law of the population under `control` (pooled over buckets in common mode).
    pub measure: MeasureSummary,
    pub buckets: BTreeMap<CellPathIndex, BucketSummary>,
    pub y0: f64,
    /// Value field of the last best response (the first bucket's in common mode).
    pub value_field: Option<ValueField>,
    pub control: FeedbackControl,
    pub residual_history: Vec<f64>,
    pub converged: bool,
    /// Distance between bucket laws of two frozen-control runs with different seeds.
    pub noise_floor: Option<f64>,
    pub exploitability: Option<Exploitability>,
    pub certificate: Option<CertificateReport>,
    /// Final particle ensemble under `control`.
    pub ensemble: Arc<ParticleEnsemble>,
}

/// Best response to a frozen measure.
pub struct BestResponse {
    pub y0: f64,
    pub control: FeedbackControl,
    pub value_field: Option<ValueField>,
}

pub fn best_response(spec: &ModelSpec, m: &MeasureSummary, params: &SolverParams) -> Result<BestResponse> {
    match &params.best_response {
        BestResponseMethod::Hjb { grid, scheme } => {
            let vf = solve_hjb_grid(spec, m, grid, *scheme)?;
            let control = extract_feedback(spec, m, &vf)?;
            Ok(BestResponse { y0: vf.y0(spec.x0[0]), control, value_field: Some(vf) })
        }
        BestResponseMethod::Regression { basis, family } => {
            if family.is_empty() {
                return Err(Error::InvalidModel("regression best response needs a nonempty family".into()));
            }
            let seed = derive_seed(params.seed, 11);
            let mut best: Option<(f64, usize, crate::bestresponse::RegressionFit)> = None;
            for (k, sel) in family.iter().enumerate() {
                let ens = simulate_selection(spec, sel, m, params.particles, seed, None)?;
                let res = solve_bsde_fixed_measure(spec, m, &ens, basis)?;
                if best.as_ref().is_none_or(|(v, _, _)| res.y0 > *v) {
                    best = Some((res.y0, k, res.fit));
                }
            }
            let (y0, k, fit) = best.expect("family is nonempty");
            let control = FeedbackControl::Regression {
                spec: Arc::new(spec.clone()),
                measure: Arc::new(m.clone()),
                fit: Arc::new(fit),
                selection: family[k].clone(),
            };
            Ok(BestResponse { y0, control, value_field: None })
        }
    }
}

pub struct PicardStep {
    pub m_next: MeasureSummary,
    /// Law under the best response.
    pub m_star: MeasureSummary,
    pub residual: f64,
    pub y0: f64,
    pub control: FeedbackControl,
    pub value_field: Option<ValueField>,
    pub ensemble: ParticleEnsemble,
}

/// Best response to `m_k`, its simulated law `m*`, and the blend `(1 - beta) m_k + beta m*`.
pub fn picard_step(spec: &ModelSpec, m_k: &MeasureSummary, beta: f64, params: &SolverParams) -> Result<PicardStep> {
    m_k.check()?;
    let br = best_response(spec, m_k, params)?;
    let common = (spec.common_noise_dim > 0).then_some(CommonNoiseMode::Shared);
    let ens = simulate_forward(spec, &br.control, m_k, params.particles, derive_seed(params.seed, 1), common)?;
    let ens = Arc::new(ens);
    let m_star = summarize(&ens.whole(), params.bins);
    let residual = measure_distance(m_k, &m_star)?;
    let m_next = m_k.blend(&m_star, beta, params.bins)?;
    let ensemble = Arc::try_unwrap(ens).unwrap_or_else(|a| (*a).clone());
    Ok(PicardStep { m_next, m_star, residual, y0: br.y0, control: br.control, value_field: br.value_field, ensemble })
}

/// Law of the zero-drift rollout under the first diffusion action.
fn initial_measure(spec: &ModelSpec, params: &SolverParams) -> Result<MeasureSummary> {
    let times = params.times(spec.horizon);
    let dirac = MeasureSummary::dirac(&times, &spec.x0);
    let common = (spec.common_noise_dim > 0).then_some(CommonNoiseMode::Shared);
    let ens = Arc::new(simulate_selection(
        spec,
        &DiffusionSelection::Constant(0),
        &dirac,
        params.particles,
        derive_seed(params.seed, 0),
        common,
    )?);
    Ok(summarize(&ens.whole(), params.bins))
}

fn rollout_value(ens: &ParticleEnsemble, spec: &ModelSpec) -> (f64, f64) {
    let n = ens.n_particles;
    let l = ens.steps();
    let rewards = ens.running_reward.as_ref().expect("simulated ensembles carry rewards");
    let vals: Vec<f64> = (0..n).map(|i| rewards[i] + spec.terminal(ens.state(i, l))).collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = if n > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    (mean, (var / n as f64).sqrt())
}

/// Fresh best response to `eq.measure` minus the incumbent control, both rolled
/// out against `eq.measure` on independent streams.
pub fn exploitability(
    spec: &ModelSpec,
    eq: &EquilibriumResult,
    params: &SolverParams,
    n: usize,
    seed: u64,
) -> Result<Exploitability> {
    let m = &eq.measure;
    let br = best_response(spec, m, params)?;
    let common = (spec.common_noise_dim > 0).then_some(CommonNoiseMode::Shared);
    let fresh = simulate_forward(spec, &br.control, m, n, derive_seed(seed, 21), common)?;
    let incumbent = simulate_forward(spec, &eq.control, m, n, derive_seed(seed, 22), common)?;
    let (v1, s1) = rollout_value(&fresh, spec);
    let (v2, s2) = rollout_value(&incumbent, spec);
    Ok(Exploitability { value: v1 - v2, se: (s1 * s1 + s2 * s2).sqrt(), best_response_value: v1, incumbent_value: v2 })
}

fn finish(
    spec: &ModelSpec,
    mut result: EquilibriumResult,
    params: &SolverParams,
    best_residual: f64,
) -> Result<EquilibriumResult> {
    if let Some(n) = params.exploitability_particles {
        if result.mode == Mode::NoCommon {
            result.exploitability = Some(exploitability(spec, &result, params, n, derive_seed(params.seed, 2))?);
        }
    }
    if let (Some(cp), Some(_)) = (&params.certificate, &result.value_field) {
        result.certificate =
            Some(mkv2bsde_certificate(spec, &result, &cp.test_laws, cp.particles, derive_seed(params.seed, 3))?);
    }
    if result.converged {
        Ok(result)
    } else {
        Err(Error::NotConverged { best_residual, partial: Box::new(result) })
    }
}

pub fn solve_mfg_no_common(spec: &ModelSpec, params: &SolverParams) -> Result<EquilibriumResult> {
    params.check()?;
    spec.check_structure()?;
    let mut m = initial_measure(spec, params)?;
    let mut history = Vec::new();
    let mut last = None;
    let mut converged = false;
    for k in 0..params.max_iter {
        let step = picard_step(spec, &m, params.beta, params)?;
        info!("iteration {k}: residual {:.6e}, Y0 {:.6}", step.residual, step.y0);
        history.push(step.residual);
        converged = step.residual < params.tol;
        m = step.m_next.clone();
        last = Some(step);
        if converged {
            break;
        }
    }
    let step = last.expect("at least one iteration");
    let best = history.iter().cloned().fold(f64::INFINITY, f64::min);
    let result = EquilibriumResult {
        mode: Mode::NoCommon,
        measure: step.m_star,
        buckets: BTreeMap::new(),
        y0: step.y0,
        value_field: step.value_field,
        control: step.control,
        residual_history: history,
        converged,
        noise_floor: None,
        exploitability: None,
        certificate: None,
        ensemble: Arc::new(step.ensemble),
    };
    finish(spec, result, params, best)
}

/// Controls and measures keyed by the particle's cell path.
struct BucketPolicy<'a> {
    codes: &'a [usize],
    controls: &'a [FeedbackControl],
    measures: &'a [MeasureSummary],
}

impl Policy for BucketPolicy<'_> {
    fn strategy(&self, particle: usize, step: usize, t: f64, x: &[f64]) -> Result<Cow<'_, MixedStrategy>> {
        self.controls[self.codes[particle]].strategy(step, t, x)
    }
    fn measure(&self, particle: usize) -> &MeasureSummary {
        &self.measures[self.codes[particle]]
    }
}

fn cumulative(increments: &[f64], n: usize, l: usize, p0: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut w = vec![0.0; p0];
            let mut out = w.clone();
            for j in 0..l {
                for k in 0..p0 {
                    w[k] += increments[(i * l + j) * p0 + k];
                }
                out.extend_from_slice(&w);
            }
            out
        })
        .collect()
}

struct BucketLaws {
    interpolated: Vec<MeasureSummary>,
    state: Vec<MeasureSummary>,
}

fn bucket_laws(ens: &ParticleEnsemble, part: &CellPartition, keys: &[CellPathIndex], bins: usize) -> Result<BucketLaws> {
    let map = conditional_buckets(ens, part)?;
    if map.total_count() != ens.n_particles {
        return Err(Error::InvalidModel("bucket counts do not add up to N".into()));
    }
    let raw = Arc::new(ens.clone());
    let mut interpolated = Vec::with_capacity(keys.len());
    let mut state = Vec::with_capacity(keys.len());
    for key in keys {
        let b = &map.buckets[key];
        interpolated.push(summarize(b, bins));
        let sub = crate::measures::EmpiricalPathMeasure::subset(Arc::clone(&raw), b.indices.clone())?;
        state.push(summarize(&sub, bins));
    }
    Ok(BucketLaws { interpolated, state })
}

fn weighted_distance(a: &[MeasureSummary], b: &[MeasureSummary], counts: &[usize]) -> Result<f64> {
    let n: usize = counts.iter().sum();
    let mut total = 0.0;
    for ((x, y), &c) in a.iter().zip(b).zip(counts) {
        total += c as f64 / n as f64 * measure_distance(x, y)?;
    }
    Ok(total)
}

/// Bucketed iteration at partition level `level`: coefficients read the law of
/// the particle's own cell path, frozen from the previous iterate.
pub fn solve_mfg_common(spec: &ModelSpec, level: u32, params: &SolverParams) -> Result<EquilibriumResult> {
    params.check()?;
    spec.check_structure()?;
    let p0 = spec.common_noise_dim;
    if p0 == 0 {
        return Err(Error::MissingCommonNoise);
    }
    let part = build_partition(level, p0, spec.horizon)?;
    let n = params.particles;
    let expected = part.expected_occupancy(n);
    if expected < params.min_bucket as f64 {
        return Err(Error::BucketStarvation { code: "*".into(), count: expected.floor() as usize, min: params.min_bucket });
    }
    let times = params.times(spec.horizon);
    let l = params.time_steps;
    let noise_seed = derive_seed(params.seed, 5);
    let increments = draw_common_noise(noise_seed, n, &times, p0, CommonNoiseMode::PerParticle);
    let paths = cumulative(&increments, n, l, p0);
    let particle_keys: Vec<CellPathIndex> =
        paths.iter().map(|w| cell_path(w, &times, &part)).collect::<Result<_>>()?;
    let mut counts_by_key: BTreeMap<CellPathIndex, usize> = BTreeMap::new();
    for k in &particle_keys {
        *counts_by_key.entry(k.clone()).or_default() += 1;
    }
    let total_cells = (part.bins() as f64).powi(part.steps() as i32);
    if (counts_by_key.len() as f64) < total_cells {
        return Err(Error::BucketStarvation {
            code: "unvisited".into(),
            count: 0,
            min: params.min_bucket,
        });
    }
    if let Some((k, &c)) = counts_by_key.iter().find(|(_, &c)| c < params.min_bucket) {
        return Err(Error::BucketStarvation { code: k.to_string(), count: c, min: params.min_bucket });
    }
    let keys: Vec<CellPathIndex> = counts_by_key.keys().cloned().collect();
    let counts: Vec<usize> = counts_by_key.values().cloned().collect();
    let slot: BTreeMap<&CellPathIndex, usize> = keys.iter().enumerate().map(|(i, k)| (k, i)).collect();
    let codes: Vec<usize> = particle_keys.iter().map(|k| slot[k]).collect();
    let sim_seed = derive_seed(params.seed, 1);

    let simulate = |controls: &[FeedbackControl], measures: &[MeasureSummary], seed: u64, incs: &[f64]| {
        let policy = BucketPolicy { codes: &codes, controls, measures };
        simulate_policy(spec, &policy, &times, n, seed, Some(incs))
    };
    let coupled = |laws: &BucketLaws, pooled: &MeasureSummary| -> Vec<MeasureSummary> {
        match params.coupling {
            Coupling::Conditional => laws.interpolated.clone(),
            Coupling::Unconditional => vec![pooled.clone(); keys.len()],
        }
    };

    // zero-drift start
    let dirac = MeasureSummary::dirac(&times, &spec.x0);
    let start = zero_drift_start(spec, &dirac, &times, n, derive_seed(params.seed, 0), &increments)?;
    let laws = bucket_laws(&start, &part, &keys, params.bins)?;
    let pooled = summarize(&Arc::new(start).whole(), params.bins);
    let mut m = coupled(&laws, &pooled);

    let mut history = Vec::new();
    let mut converged = false;
    type Last = (Vec<FeedbackControl>, Vec<f64>, Option<ValueField>, ParticleEnsemble, BucketLaws, MeasureSummary, Vec<MeasureSummary>);
    let mut last: Option<Last> = None;
    for it in 0..params.max_iter {
        let mut controls: Vec<FeedbackControl> = Vec::with_capacity(keys.len());
        let mut y0s: Vec<f64> = Vec::with_capacity(keys.len());
        let mut first_field = None;
        let distinct = matches!(params.coupling, Coupling::Conditional);
        for (b, mb) in m.iter().enumerate() {
            if !distinct && b > 0 {
                controls.push(controls[0].clone());
                y0s.push(y0s[0]);
                continue;
            }
            let br = best_response(spec, mb, params)?;
            if b == 0 {
                first_field = br.value_field;
            }
            controls.push(br.control);
            y0s.push(br.y0);
        }
        let ens = simulate(&controls, &m, sim_seed, &increments)?;
        let laws = bucket_laws(&ens, &part, &keys, params.bins)?;
        let pooled = summarize(&Arc::new(ens.clone()).whole(), params.bins);
        let target = coupled(&laws, &pooled);
        let residual = weighted_distance(&m, &target, &counts)?;
        info!("iteration {it}: bucket residual {residual:.6e}");
        history.push(residual);
        converged = residual < params.tol;
        let next = m.iter().zip(&target).map(|(a, b)| a.blend(b, params.beta, params.bins)).collect::<Result<_>>()?;
        last = Some((controls, y0s, first_field, ens, laws, pooled, std::mem::replace(&mut m, next)));
        if converged {
            break;
        }
    }
    let (controls, y0s, first_field, ens, laws, pooled, m) = last.expect("at least one iteration");

    // noise floor: same frozen controls and measures, independent noise
    let alt_incs = draw_common_noise(derive_seed(params.seed, 6), n, &times, p0, CommonNoiseMode::PerParticle);
    let alt_paths = cumulative(&alt_incs, n, l, p0);
    let alt_codes: Vec<usize> = alt_paths
        .iter()
        .map(|w| cell_path(w, &times, &part).map(|k| slot.get(&k).copied()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .map(|c| c.ok_or_else(|| Error::BucketStarvation { code: "unvisited".into(), count: 0, min: params.min_bucket }))
        .collect::<Result<_>>()?;
    let alt_ens = {
        let policy = BucketPolicy { codes: &alt_codes, controls: &controls, measures: &m };
        simulate_policy(spec, &policy, &times, n, derive_seed(params.seed, 7), Some(&alt_incs))?
    };
    let alt_laws = bucket_laws(&alt_ens, &part, &keys, params.bins)?;
    let noise_floor = weighted_distance(&laws.interpolated, &alt_laws.interpolated, &counts)?;

    let y0 = y0s.iter().zip(&counts).map(|(v, &c)| v * c as f64).sum::<f64>() / n as f64;
    let buckets = keys
        .iter()
        .enumerate()
        .map(|(b, k)| {
            (k.clone(), BucketSummary { count: counts[b], interpolated: laws.interpolated[b].clone(), state: laws.state[b].clone() })
        })
        .collect();
    let best = history.iter().cloned().fold(f64::INFINITY, f64::min);
    let result = EquilibriumResult {
        mode: Mode::Common { level },
        measure: pooled,
        buckets,
        y0,
        value_field: first_field,
        control: controls.into_iter().next().expect("at least one bucket"),
        residual_history: history,
        converged,
        noise_floor: Some(noise_floor),
        exploitability: None,
        certificate: None,
        ensemble: Arc::new(ens),
    };
    if result.converged {
        Ok(result)
    } else {
        Err(Error::NotConverged { best_residual: best, partial: Box::new(result) })
    }
}

fn zero_drift_start(
    spec: &ModelSpec,
    dirac: &MeasureSummary,
    times: &[f64],
    n: usize,
    seed: u64,
    increments: &[f64],
) -> Result<ParticleEnsemble> {
    struct ZeroDrift<'a> {
        m: &'a MeasureSummary,
        q: MixedStrategy,
    }
    impl Policy for ZeroDrift<'_> {
        fn strategy(&self, _: usize, _: usize, _: f64, _: &[f64]) -> Result<Cow<'_, MixedStrategy>> {
            Ok(Cow::Borrowed(&self.q))
        }
        fn measure(&self, _: usize) -> &MeasureSummary {
            self.m
        }
        fn zero_drift(&self) -> bool {
            true
        }
    }
    let policy = ZeroDrift { m: dirac, q: MixedStrategy::dirac(0, 0, spec.ka(), spec.kb()) };
    simulate_policy(spec, &policy, times, n, seed, Some(increments))
}
