//! Named models and coefficient tables.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActionGrid, CoefficientBounds, MeasureSummary, ModelSpec};
use crate::rng::{CounterRng, Purpose};

/// Linear-quadratic crowd model with drift control, an optional volatility menu
/// and an optional common-noise loading.
///
/// Drift is `sigma(b) * a / sigma[0]`, so under the base volatility the action is
/// the drift itself. The reward is
/// `-(r/2) drift^2 - (q/2)(x - kappa * mean_t)^2 - vol_cost (sigma(b)^2 - sigma[0]^2)`
/// with terminal reward `-(g/2) x^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqParams {
    pub q: f64,
    pub r: f64,
    pub g: f64,
    pub kappa: f64,
    /// Volatility menu; the first entry is the base volatility.
    pub sigma: Vec<f64>,
    pub x0: f64,
    pub horizon: f64,
    #[serde(default)]
    pub vol_cost: f64,
    #[serde(default)]
    pub sigma_common: f64,
    /// Keep a common-noise column even when `sigma_common` is zero.
    #[serde(default)]
    pub common_noise: bool,
    #[serde(default = "default_alpha_max")]
    pub alpha_max: f64,
    #[serde(default = "default_alpha_count")]
    pub alpha_count: usize,
    #[serde(default = "default_box")]
    pub box_halfwidth: f64,
}

fn default_alpha_max() -> f64 {
    5.0
}
fn default_alpha_count() -> usize {
    101
}
fn default_box() -> f64 {
    5.0
}

impl Default for LqParams {
    fn default() -> Self {
        Self {
            q: 1.0,
            r: 1.0,
            g: 1.0,
            kappa: 0.5,
            sigma: vec![1.0, 1.5],
            x0: 1.0,
            horizon: 1.0,
            vol_cost: 0.1,
            sigma_common: 0.0,
            common_noise: false,
            alpha_max: default_alpha_max(),
            alpha_count: default_alpha_count(),
            box_halfwidth: default_box(),
        }
    }
}

pub fn lq(p: &LqParams) -> Result<ModelSpec> {
    if !(p.r > 0.0) || p.q < 0.0 || p.g < 0.0 {
        return Err(Error::InvalidModel("lq needs r > 0, q >= 0, g >= 0".into()));
    }
    if p.sigma.is_empty() || p.sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidModel("lq volatilities must be positive".into()));
    }
    let base = p.sigma[0];
    let common = p.sigma_common;
    let noise_dim = if common != 0.0 || p.common_noise { 2 } else { 1 };
    let (q, r, g, kappa, vol_cost) = (p.q, p.r, p.g, p.kappa, p.vol_cost);
    let drift_factor = Arc::new(move |_t: f64, _x: &[f64], _m: &MeasureSummary, a: &[f64]| {
        let mut v = DVector::zeros(noise_dim);
        v[0] = a[0] / base;
        v
    });
    let diffusion = Arc::new(move |_t: f64, _x: &[f64], _m: &MeasureSummary, b: &[f64]| {
        let mut s = DMatrix::zeros(1, noise_dim);
        s[(0, 0)] = b[0];
        if noise_dim == 2 {
            s[(0, 1)] = common;
        }
        s
    });
    let running_cost = Arc::new(move |t: f64, x: &[f64], m: &MeasureSummary, a: &[f64], b: &[f64]| {
        let drift = b[0] * a[0] / base;
        let dev = x[0] - kappa * m.mean_at(t)[0];
        -0.5 * r * drift * drift - 0.5 * q * dev * dev - vol_cost * (b[0] * b[0] - base * base)
    });
    let terminal_cost = Arc::new(move |x: &[f64]| -0.5 * g * x[0] * x[0]);
    let smax = p.sigma.iter().cloned().fold(0.0, f64::max);
    let xmax = p.x0.abs() + p.box_halfwidth;
    let dmax = p.alpha_max * smax / base;
    let bounds = CoefficientBounds {
        drift_factor: p.alpha_max / base,
        diffusion: smax.max(common.abs()),
        drift: dmax,
        running_cost: 0.5 * r * dmax * dmax
            + 0.5 * q * (xmax * (1.0 + kappa.abs())).powi(2)
            + vol_cost.abs() * (smax * smax - base * base).abs(),
        terminal_cost: 0.5 * g * xmax * xmax,
        lipschitz_x: Some(1e-9),
    };
    Ok(ModelSpec {
        name: "lq".into(),
        dim_state: 1,
        noise_dim,
        common_noise_dim: noise_dim - 1,
        horizon: p.horizon,
        x0: vec![p.x0],
        drift_factor,
        diffusion,
        running_cost,
        terminal_cost,
        drift_actions: ActionGrid::linspace(-p.alpha_max, p.alpha_max, p.alpha_count)?,
        diffusion_actions: ActionGrid::scalar(&p.sigma)?,
        bounds,
        probe_box: vec![(p.x0 - p.box_halfwidth, p.x0 + p.box_halfwidth)],
    })
}

/// Driftless-by-default volatility choice: `lambda(a) = a`, `sigma(b) = b`,
/// `f = -vol_cost * sigma^2`, convex terminal reward `sqrt(1 + x^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoVolParams {
    pub sigma: Vec<f64>,
    pub x0: f64,
    pub horizon: f64,
    #[serde(default = "default_drift_grid")]
    pub drift_actions: Vec<f64>,
    #[serde(default)]
    pub vol_cost: f64,
    #[serde(default = "default_box")]
    pub box_halfwidth: f64,
}

fn default_drift_grid() -> Vec<f64> {
    vec![0.0]
}

impl Default for TwoVolParams {
    fn default() -> Self {
        Self {
            sigma: vec![1.0, 2.0],
            x0: 0.0,
            horizon: 1.0,
            drift_actions: default_drift_grid(),
            vol_cost: 0.0,
            box_halfwidth: default_box(),
        }
    }
}

pub fn twovol(p: &TwoVolParams) -> Result<ModelSpec> {
    let vol_cost = p.vol_cost;
    let smax = p.sigma.iter().map(|s| s.abs()).fold(0.0, f64::max);
    let amax = p.drift_actions.iter().map(|a| a.abs()).fold(0.0, f64::max);
    let xmax = p.x0.abs() + p.box_halfwidth;
    Ok(ModelSpec {
        name: "twovol".into(),
        dim_state: 1,
        noise_dim: 1,
        common_noise_dim: 0,
        horizon: p.horizon,
        x0: vec![p.x0],
        drift_factor: Arc::new(|_t, _x, _m, a| DVector::from_element(1, a[0])),
        diffusion: Arc::new(|_t, _x, _m, b| DMatrix::from_element(1, 1, b[0])),
        running_cost: Arc::new(move |_t, _x, _m, _a, b| -vol_cost * b[0] * b[0]),
        terminal_cost: Arc::new(|x| (1.0 + x[0] * x[0]).sqrt()),
        drift_actions: ActionGrid::scalar(&p.drift_actions)?,
        diffusion_actions: ActionGrid::scalar(&p.sigma)?,
        bounds: CoefficientBounds {
            drift_factor: amax,
            diffusion: smax,
            drift: amax * smax,
            running_cost: vol_cost.abs() * smax * smax,
            terminal_cost: (1.0 + xmax * xmax).sqrt(),
            lipschitz_x: Some(1e-9),
        },
        probe_box: vec![(p.x0 - p.box_halfwidth, p.x0 + p.box_halfwidth)],
    })
}

/// Drift grid times volatility grid with a congestion cost on volatility that
/// grows with the population's marginal variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolChoiceParams {
    pub drift_actions: Vec<f64>,
    pub sigma: Vec<f64>,
    pub congestion: f64,
    pub q: f64,
    pub x0: f64,
    pub horizon: f64,
    #[serde(default = "default_box")]
    pub box_halfwidth: f64,
}

impl Default for VolChoiceParams {
    fn default() -> Self {
        Self {
            drift_actions: vec![-1.0, 0.0, 1.0],
            sigma: vec![0.5, 1.0, 1.5],
            congestion: 0.5,
            q: 1.0,
            x0: 0.0,
            horizon: 1.0,
            box_halfwidth: default_box(),
        }
    }
}

pub fn volchoice(p: &VolChoiceParams) -> Result<ModelSpec> {
    let (c, q) = (p.congestion, p.q);
    let smax = p.sigma.iter().map(|s| s.abs()).fold(0.0, f64::max);
    let amax = p.drift_actions.iter().map(|a| a.abs()).fold(0.0, f64::max);
    let xmax = p.x0.abs() + p.box_halfwidth;
    Ok(ModelSpec {
        name: "volchoice".into(),
        dim_state: 1,
        noise_dim: 1,
        common_noise_dim: 0,
        horizon: p.horizon,
        x0: vec![p.x0],
        drift_factor: Arc::new(|_t, _x, _m, a| DVector::from_element(1, a[0])),
        diffusion: Arc::new(|_t, _x, _m, b| DMatrix::from_element(1, 1, b[0])),
        running_cost: Arc::new(move |t, x, m, a, b| {
            let drift = a[0] * b[0];
            -0.5 * drift * drift - c * m.var_at(t, 0) * b[0] * b[0] - 0.5 * q * x[0] * x[0] + 0.25 * b[0] * b[0]
        }),
        terminal_cost: Arc::new(move |x| -0.5 * x[0] * x[0]),
        drift_actions: ActionGrid::scalar(&p.drift_actions)?,
        diffusion_actions: ActionGrid::scalar(&p.sigma)?,
        bounds: CoefficientBounds {
            drift_factor: amax,
            diffusion: smax,
            drift: amax * smax,
            // probes use a Dirac measure, so the congestion term vanishes there
            running_cost: 0.5 * (amax * smax).powi(2) + 0.5 * q * xmax * xmax + 0.25 * smax * smax,
            terminal_cost: 0.5 * xmax * xmax,
            lipschitz_x: Some(1e-9),
        },
        probe_box: vec![(p.x0 - p.box_halfwidth, p.x0 + p.box_halfwidth)],
    })
}

/// One monomial `c * t^t * prod x_k^x[k] * prod mean_k^mean[k] * prod var_k^var[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub c: f64,
    #[serde(default)]
    pub t: u32,
    #[serde(default)]
    pub x: Vec<u32>,
    #[serde(default)]
    pub mean: Vec<u32>,
    #[serde(default)]
    pub var: Vec<u32>,
}

pub type Poly = Vec<Term>;

fn eval_poly(p: &Poly, t: f64, x: &[f64], m: &MeasureSummary) -> f64 {
    p.iter()
        .map(|term| {
            let mut v = term.c * t.powi(term.t as i32);
            for (k, &e) in term.x.iter().enumerate() {
                if e > 0 {
                    v *= x[k].powi(e as i32);
                }
            }
            if term.mean.iter().any(|&e| e > 0) {
                let mu = m.mean_at(t);
                for (k, &e) in term.mean.iter().enumerate() {
                    v *= mu[k].powi(e as i32);
                }
            }
            for (k, &e) in term.var.iter().enumerate() {
                if e > 0 {
                    v *= m.var_at(t, k).powi(e as i32);
                }
            }
            v
        })
        .sum()
}

/// Coefficient tables indexed by action label, entries polynomial in the state,
/// time and the measure's mean and variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableModel {
    pub dim_state: usize,
    pub noise_dim: usize,
    #[serde(default)]
    pub common_noise_dim: usize,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub drift_actions: Vec<Vec<f64>>,
    pub diffusion_actions: Vec<Vec<f64>>,
    /// `lambda[a][component]`
    pub lambda: Vec<Vec<Poly>>,
    /// `sigma[b][row][column]`
    pub sigma: Vec<Vec<Vec<Poly>>>,
    /// `f[a][b]`
    pub f: Vec<Vec<Poly>>,
    pub xi: Poly,
    pub bounds: CoefficientBounds,
    pub probe_box: Vec<(f64, f64)>,
}

impl TableModel {
    pub fn build(&self) -> Result<ModelSpec> {
        let (d, p) = (self.dim_state, self.noise_dim);
        let ka = self.drift_actions.len();
        let kb = self.diffusion_actions.len();
        let shape_err = |what: &str| Error::InvalidModel(format!("table `{what}` has the wrong shape"));
        if self.lambda.len() != ka || self.lambda.iter().any(|v| v.len() != p) {
            return Err(shape_err("lambda"));
        }
        if self.sigma.len() != kb || self.sigma.iter().any(|s| s.len() != d || s.iter().any(|r| r.len() != p)) {
            return Err(shape_err("sigma"));
        }
        if self.f.len() != ka || self.f.iter().any(|r| r.len() != kb) {
            return Err(shape_err("f"));
        }
        let drift_grid = ActionGrid::new(self.drift_actions.clone())?;
        let diff_grid = ActionGrid::new(self.diffusion_actions.clone())?;
        // coefficient closures receive action values; map them back to labels
        let label = |grid: &ActionGrid, v: &[f64]| grid.points().iter().position(|q| q.as_slice() == v).unwrap_or(0);
        let (lam, dg) = (Arc::new(self.lambda.clone()), drift_grid.clone());
        let drift_factor = Arc::new(move |t: f64, x: &[f64], m: &MeasureSummary, a: &[f64]| {
            let row = &lam[label(&dg, a)];
            DVector::from_iterator(row.len(), row.iter().map(|poly| eval_poly(poly, t, x, m)))
        });
        let (sig, bg) = (Arc::new(self.sigma.clone()), diff_grid.clone());
        let diffusion = Arc::new(move |t: f64, x: &[f64], m: &MeasureSummary, b: &[f64]| {
            let s = &sig[label(&bg, b)];
            DMatrix::from_fn(d, p, |r, c| eval_poly(&s[r][c], t, x, m))
        });
        let (f, dg2, bg2) = (Arc::new(self.f.clone()), drift_grid.clone(), diff_grid.clone());
        let running_cost = Arc::new(move |t: f64, x: &[f64], m: &MeasureSummary, a: &[f64], b: &[f64]| {
            eval_poly(&f[label(&dg2, a)][label(&bg2, b)], t, x, m)
        });
        let xi = self.xi.clone();
        let dummy = MeasureSummary::dirac(&[0.0], &vec![0.0; d]);
        let terminal_cost = Arc::new(move |x: &[f64]| eval_poly(&xi, 0.0, x, &dummy));
        let spec = ModelSpec {
            name: "table".into(),
            dim_state: d,
            noise_dim: p,
            common_noise_dim: self.common_noise_dim,
            horizon: self.horizon,
            x0: self.x0.clone(),
            drift_factor,
            diffusion,
            running_cost,
            terminal_cost,
            drift_actions: drift_grid,
            diffusion_actions: diff_grid,
            bounds: self.bounds.clone(),
            probe_box: self.probe_box.clone(),
        };
        spec.check_structure()?;
        Ok(spec)
    }
}

impl Term {
    pub fn constant(c: f64) -> Self {
        Term { c, t: 0, x: Vec::new(), mean: Vec::new(), var: Vec::new() }
    }
}

impl TableModel {
    /// Constant coefficients drawn uniformly from `[-1, 1]`, with `noise_dim = dim`.
    pub fn random_constant(seed: u64, dim: usize, ka: usize, kb: usize) -> Self {
        let mut rng = CounterRng::new(seed, Purpose::Benchmark, dim as u64, (ka * 16 + kb) as u64);
        let mut draw = move || 2.0 * rng.uniform() - 1.0;
        let lambda: Vec<Vec<f64>> = (0..ka).map(|_| (0..dim).map(|_| draw()).collect()).collect();
        let sigma: Vec<Vec<Vec<f64>>> =
            (0..kb).map(|_| (0..dim).map(|_| (0..dim).map(|_| draw()).collect()).collect()).collect();
        let f: Vec<Vec<f64>> = (0..ka).map(|_| (0..kb).map(|_| draw()).collect()).collect();
        let mut drift = 0.0_f64;
        for l in &lambda {
            for s in &sigma {
                let v = DMatrix::from_fn(dim, dim, |r, c| s[r][c]) * DVector::from_column_slice(l);
                drift = drift.max(v.norm());
            }
        }
        let amax = |v: &mut dyn Iterator<Item = f64>| v.fold(0.0_f64, |a, b| a.max(b.abs()));
        let bounds = CoefficientBounds {
            drift_factor: amax(&mut lambda.iter().flatten().copied()),
            diffusion: amax(&mut sigma.iter().flatten().flatten().copied()),
            drift,
            running_cost: amax(&mut f.iter().flatten().copied()),
            terminal_cost: 1.0,
            lipschitz_x: Some(1e-9),
        };
        let c = |v: f64| vec![Term::constant(v)];
        TableModel {
            dim_state: dim,
            noise_dim: dim,
            common_noise_dim: 0,
            x0: vec![0.0; dim],
            horizon: 1.0,
            drift_actions: (0..ka).map(|a| vec![a as f64]).collect(),
            diffusion_actions: (0..kb).map(|b| vec![b as f64]).collect(),
            lambda: lambda.iter().map(|row| row.iter().map(|&v| c(v)).collect()).collect(),
            sigma: sigma.iter().map(|s| s.iter().map(|row| row.iter().map(|&v| c(v)).collect()).collect()).collect(),
            f: f.iter().map(|row| row.iter().map(|&v| c(v)).collect()).collect(),
            xi: c(0.0),
            bounds,
            probe_box: vec![(-1.0, 1.0); dim],
        }
    }
}

/// Builds a named model from a JSON parameter object; unknown keys are rejected.
pub fn from_name(name: &str, params: serde_json::Value) -> Result<ModelSpec> {
    match name {
        "lq" => lq(&serde_json::from_value(params)?),
        "twovol" => twovol(&serde_json::from_value(params)?),
        "volchoice" => volchoice(&serde_json::from_value(params)?),
        other => Err(Error::InvalidModel(format!("unknown builtin model `{other}`"))),
    }
}
