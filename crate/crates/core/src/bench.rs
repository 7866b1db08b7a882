//! Reference solutions that only read the model's coefficients: the LQ Riccati
//! system, a brute-force Hamiltonian and plain Euler Monte Carlo.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::builtin::LqParams;
use crate::error::{Error, Result};
use crate::model::{Histogram, MeasureSummary, ModelSpec};
use crate::rng::{CounterRng, Purpose};

/// Halving tolerance of the Riccati integrator.
pub const RICCATI_TOL: f64 = 1e-8;
const MAX_REFINE: usize = 1 << 12;

/// LQ equilibrium from the Riccati system on a uniform grid.
///
/// With the minimization value `v = P x^2 / 2 + eta mean x + c`:
/// `-P' = q - P^2 / r`, `eta' = (2 P eta + eta^2) / r + q kappa`,
/// `mean' = -(P + eta) mean / r`, and `c` collects the remaining terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiReference {
    pub times: Vec<f64>,
    pub p: Vec<f64>,
    pub eta: Vec<f64>,
    pub mean: Vec<f64>,
    pub c: Vec<f64>,
    /// Volatility index chosen at each time.
    pub vol_choice: Vec<usize>,
    pub r: f64,
    /// Largest change between the last two refinements.
    pub error_estimate: f64,
}

impl RiccatiReference {
    /// Equilibrium value of the reward game at `(0, x)`.
    pub fn value_at(&self, x: f64) -> f64 {
        -(0.5 * self.p[0] * x * x + self.eta[0] * self.mean[0] * x + self.c[0])
    }

    /// Optimal drift is `-gain(t) x - offset(t)`; returns `(gain, offset)` at grid index `j`.
    pub fn gain(&self, j: usize) -> (f64, f64) {
        (self.p[j] / self.r, self.eta[j] * self.mean[j] / self.r)
    }

    pub fn mean_path(&self) -> &[f64] {
        &self.mean
    }
}

fn rk4_backward(f: &dyn Fn(f64, [f64; 2]) -> [f64; 2], end: [f64; 2], horizon: f64, sub: usize) -> Vec<[f64; 2]> {
    // returns values on the fine grid t_k = k * horizon / sub
    let h = horizon / sub as f64;
    let mut out = vec![[0.0; 2]; sub + 1];
    out[sub] = end;
    let add = |y: [f64; 2], k: [f64; 2], s: f64| [y[0] + s * k[0], y[1] + s * k[1]];
    for k in (0..sub).rev() {
        let t = (k + 1) as f64 * h;
        let y = out[k + 1];
        let k1 = f(t, y);
        let k2 = f(t - 0.5 * h, add(y, k1, -0.5 * h));
        let k3 = f(t - 0.5 * h, add(y, k2, -0.5 * h));
        let k4 = f(t - h, add(y, k3, -h));
        out[k] = [
            y[0] - h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            y[1] - h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ];
    }
    out
}

fn riccati_once(p: &LqParams, steps: usize, refine: usize) -> RiccatiReference {
    let (q, r, g, kappa) = (p.q, p.r, p.g, p.kappa);
    let sub = steps * refine;
    // quarter-step backward grid, half-step forward grid: every RK4 stage and
    // every Simpson node lands on a stored point
    let fine = rk4_backward(
        &|_t, y| {
            let (pp, eta) = (y[0], y[1]);
            [pp * pp / r - q, (2.0 * pp * eta + eta * eta) / r + q * kappa]
        },
        [g, 0.0],
        p.horizon,
        4 * sub,
    );
    let h = p.horizon / sub as f64;
    let hh = 0.5 * h;
    let coef = |k4: usize| (fine[k4][0] + fine[k4][1]) / r;
    let mut mean = vec![0.0; 2 * sub + 1];
    mean[0] = p.x0;
    for k in 0..2 * sub {
        let m = mean[k];
        let (c0, c1, c2) = (coef(2 * k), coef(2 * k + 1), coef(2 * k + 2));
        let k1 = -c0 * m;
        let k2 = -c1 * (m + 0.5 * hh * k1);
        let k3 = -c1 * (m + 0.5 * hh * k2);
        let k4 = -c2 * (m + hh * k3);
        mean[k + 1] = m + hh / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    let base = p.sigma[0];
    let vol_term = |pp: f64| -> (f64, usize) {
        // reward from the volatility choice, maximized pointwise
        let mut best = (f64::NEG_INFINITY, 0);
        for (b, &s) in p.sigma.iter().enumerate() {
            let v = -0.5 * s * s * pp - p.vol_cost * (s * s - base * base);
            if v > best.0 {
                best = (v, b);
            }
        }
        best
    };
    // -c' = q kappa^2 mean^2 / 2 - (eta mean)^2 / (2 r) - (volatility reward)
    let integrand = |k2: usize| {
        let (pp, eta) = (fine[2 * k2][0], fine[2 * k2][1]);
        let m = mean[k2];
        let s = eta * m;
        0.5 * q * kappa * kappa * m * m - s * s / (2.0 * r) - vol_term(pp).0
    };
    let mut c = vec![0.0; sub + 1];
    for k in (0..sub).rev() {
        c[k] = c[k + 1] + h / 6.0 * (integrand(2 * k) + 4.0 * integrand(2 * k + 1) + integrand(2 * k + 2));
    }
    let pick = |v: &dyn Fn(usize) -> f64| (0..=steps).map(|j| v(j * refine)).collect::<Vec<f64>>();
    RiccatiReference {
        times: (0..=steps).map(|j| p.horizon * j as f64 / steps as f64).collect(),
        p: pick(&|k| fine[4 * k][0]),
        eta: pick(&|k| fine[4 * k][1]),
        mean: pick(&|k| mean[2 * k]),
        c: pick(&|k| c[k]),
        vol_choice: (0..=steps).map(|j| vol_term(fine[4 * j * refine][0]).1).collect(),
        r,
        error_estimate: f64::NAN,
    }
}

/// RK4 on `steps` intervals, refined by halving until successive refinements
/// agree to [`RICCATI_TOL`].
pub fn lq_riccati_reference(p: &LqParams, steps: usize) -> Result<RiccatiReference> {
    if steps < 100 {
        return Err(Error::InvalidModel(format!("Riccati reference needs at least 100 steps, got {steps}")));
    }
    if !(p.r > 0.0) {
        return Err(Error::InvalidModel("control cost r must be positive".into()));
    }
    let mut refine = 1;
    let mut prev = riccati_once(p, steps, refine);
    loop {
        let next = riccati_once(p, steps, refine * 2);
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let est = diff(&prev.p, &next.p)
            .max(diff(&prev.eta, &next.eta))
            .max(diff(&prev.mean, &next.mean))
            .max(diff(&prev.c, &next.c));
        if est < RICCATI_TOL {
            let mut out = next;
            out.error_estimate = est;
            return Ok(out);
        }
        refine *= 2;
        if refine > MAX_REFINE || !est.is_finite() {
            return Err(Error::StiffnessFailure { estimate: est, limit: RICCATI_TOL });
        }
        prev = next;
    }
}

fn compositions(total: usize, parts: usize, f: &mut dyn FnMut(&[usize])) {
    fn rec(left: usize, parts: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if parts == 1 {
            cur.push(left);
            f(cur);
            cur.pop();
            return;
        }
        for k in 0..=left {
            cur.push(k);
            rec(left - k, parts - 1, cur, f);
            cur.pop();
        }
    }
    rec(total, parts, &mut Vec::new(), f);
}

/// Feasible diffusion mixtures: mesh points within the relaxed tolerance and
/// the vertices of `{qb >= 0 : sum qb = 1, sum qb cov_b = target}`.
fn feasible_mixtures(covs: &[DMatrix<f64>], target: &DMatrix<f64>, mesh: usize, tol: f64) -> (Vec<Vec<f64>>, f64) {
    let kb = covs.len();
    let d = target.nrows();
    let residual = |w: &[f64]| -> f64 {
        let mix = w.iter().zip(covs).fold(DMatrix::zeros(d, d), |acc, (wi, c)| acc + c * *wi);
        (mix - target).norm()
    };
    let mut out = Vec::new();
    let mut best_gap = f64::INFINITY;
    compositions(mesh, kb, &mut |comp| {
        let w: Vec<f64> = comp.iter().map(|&c| c as f64 / mesh as f64).collect();
        let r = residual(&w);
        best_gap = best_gap.min(r);
        if r <= tol {
            out.push(w);
        }
    });
    // vertices: supports of size up to the number of equations
    let rows = d * (d + 1) / 2 + 1;
    let eq = |b: usize| -> Vec<f64> {
        let mut v = Vec::with_capacity(rows);
        for r in 0..d {
            for c in r..d {
                v.push(covs[b][(r, c)]);
            }
        }
        v.push(1.0);
        v
    };
    let mut rhs = Vec::with_capacity(rows);
    for r in 0..d {
        for c in r..d {
            rhs.push(0.5 * (target[(r, c)] + target[(c, r)]));
        }
    }
    rhs.push(1.0);
    let rhs = DVector::from_vec(rhs);
    let cols: Vec<Vec<f64>> = (0..kb).map(eq).collect();
    for mask in 1u32..(1 << kb) {
        let support: Vec<usize> = (0..kb).filter(|&b| mask >> b & 1 == 1).collect();
        if support.len() > rows {
            continue;
        }
        let a = DMatrix::from_fn(rows, support.len(), |r, c| cols[support[c]][r]);
        let Ok(sol) = a.clone().svd(true, true).solve(&rhs, 1e-14) else { continue };
        if (&a * &sol - &rhs).norm() > tol || sol.iter().any(|&v| v < -1e-12) {
            continue;
        }
        let mut w = vec![0.0; kb];
        for (c, &b) in support.iter().enumerate() {
            w[b] = sol[c].max(0.0);
        }
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        let r = residual(&w);
        best_gap = best_gap.min(r);
        if r <= tol {
            out.push(w);
        }
    }
    (out, best_gap)
}

/// Brute-force constrained Hamiltonian: drift mixtures on the full simplex mesh,
/// diffusion mixtures from [`feasible_mixtures`].
#[allow(clippy::too_many_arguments)]
pub fn brute_force_f(
    spec: &ModelSpec,
    t: f64,
    x: &[f64],
    z: &[f64],
    target: &DMatrix<f64>,
    m: &MeasureSummary,
    mesh: usize,
) -> Result<f64> {
    let (ka, kb, d) = (spec.ka(), spec.kb(), spec.dim_state);
    if ka > 6 || kb > 6 || d > 2 || mesh == 0 || mesh > 40 {
        return Err(Error::InvalidModel("brute force needs K_A, K_B <= 6, d <= 2, 1 <= mesh <= 40".into()));
    }
    let sigmas: Vec<DMatrix<f64>> = (0..kb).map(|b| spec.sigma(t, x, m, b)).collect();
    let covs: Vec<DMatrix<f64>> = sigmas.iter().map(|s| s * s.transpose()).collect();
    let mut payoff = vec![0.0; ka * kb];
    for a in 0..ka {
        let lam = spec.lambda(t, x, m, a);
        for b in 0..kb {
            let drift = &sigmas[b] * &lam;
            payoff[a * kb + b] = spec.cost(t, x, m, a, b) + drift.iter().zip(z).map(|(u, v)| u * v).sum::<f64>();
        }
    }
    let tol = 1e-9 * (1.0 + 2.0 / mesh as f64);
    let (mixtures, gap) = feasible_mixtures(&covs, target, mesh, tol);
    if mixtures.is_empty() {
        return Err(Error::InfeasibleSigma { gap });
    }
    let per_a: Vec<Vec<f64>> = mixtures
        .iter()
        .map(|qb| (0..ka).map(|a| (0..kb).map(|b| qb[b] * payoff[a * kb + b]).sum()).collect())
        .collect();
    let mut best = f64::NEG_INFINITY;
    compositions(mesh, ka, &mut |comp| {
        for g in &per_a {
            let v: f64 = comp.iter().zip(g).map(|(&c, gi)| c as f64 * gi).sum::<f64>() / mesh as f64;
            if v > best {
                best = v;
            }
        }
    });
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub y0: f64,
    pub se: f64,
}

/// Euler Monte Carlo of `E[xi(X_T) + int f dt]` with singleton action grids; the
/// measure argument is the running empirical law of the particles.
pub fn uncontrolled_reference(spec: &ModelSpec, steps: usize, n: usize, seed: u64) -> Result<McEstimate> {
    if spec.ka() != 1 || spec.kb() != 1 {
        return Err(Error::InvalidModel("uncontrolled reference needs singleton action grids".into()));
    }
    if steps == 0 || n == 0 {
        return Err(Error::InvalidModel("need at least one step and one particle".into()));
    }
    let d = spec.dim_state;
    let dt = spec.horizon / steps as f64;
    let mut xs: Vec<Vec<f64>> = vec![spec.x0.clone(); n];
    let mut reward = vec![0.0; n];
    let w = vec![1.0 / n as f64; n];
    let mut law = MeasureSummary { times: Vec::new(), dim: d, means: Vec::new(), covs: Vec::new(), histograms: Vec::new() };
    for j in 0..steps {
        let t = j as f64 * dt;
        let mut mean = vec![0.0; d];
        for x in &xs {
            for k in 0..d {
                mean[k] += x[k] / n as f64;
            }
        }
        let mut cov = vec![0.0; d * d];
        for x in &xs {
            for r in 0..d {
                for c in 0..d {
                    cov[r * d + c] += (x[r] - mean[r]) * (x[c] - mean[c]) / n as f64;
                }
            }
        }
        let hist = (0..d)
            .map(|k| Histogram::from_weighted(&xs.iter().map(|x| x[k]).collect::<Vec<_>>(), &w, 50))
            .collect();
        law.times.push(t);
        law.means.push(mean);
        law.covs.push(cov);
        law.histograms.push(hist);
        for (i, x) in xs.iter_mut().enumerate() {
            let sigma = spec.sigma(t, x, &law, 0);
            let drift = &sigma * spec.lambda(t, x, &law, 0);
            reward[i] += dt * spec.cost(t, x, &law, 0, 0);
            let mut rng = CounterRng::new(seed, Purpose::Benchmark, i as u64, j as u64);
            let dw = DVector::from_iterator(spec.noise_dim, (0..spec.noise_dim).map(|_| dt.sqrt() * rng.normal()));
            let inc = drift * dt + &sigma * dw;
            for k in 0..d {
                x[k] += inc[k];
            }
        }
    }
    let vals: Vec<f64> = xs.iter().zip(&reward).map(|(x, r)| r + spec.terminal(x)).collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = if n > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    Ok(McEstimate { y0: mean, se: (var / n as f64).sqrt() })
}

/// One line of the `benchmark` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub value: f64,
    pub reference: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl BenchRow {
    fn new(name: impl Into<String>, value: f64, reference: f64, tolerance: f64) -> Self {
        let pass = (value - reference).abs() <= tolerance;
        Self { name: name.into(), value, reference, tolerance, pass }
    }
}

/// Solver pieces against the oracles above, on small builtin models.
pub fn suite(seed: u64) -> Result<Vec<BenchRow>> {
    use crate::bestresponse::{solve_hjb_grid, Scheme, SpaceGrid};
    use crate::builtin::{lq, twovol, TwoVolParams};
    use crate::hamiltonian::driver_f;

    let mut rows = Vec::new();

    let p = LqParams::default();
    let reference = lq_riccati_reference(&p, 100)?;
    rows.push(BenchRow::new("riccati_refinement", reference.error_estimate, 0.0, RICCATI_TOL));

    // HJB against the Riccati mean path; the best response is the equilibrium value
    let spec = lq(&p)?;
    let mut m = MeasureSummary::dirac(&reference.times, &spec.x0);
    for (mean, r) in m.means.iter_mut().zip(&reference.mean) {
        mean[0] = *r;
    }
    let vf = solve_hjb_grid(&spec, &m, &SpaceGrid::new(-4.0, 5.0, 46)?, Scheme::Explicit)?;
    rows.push(BenchRow::new("lq_hjb_value", vf.y0(p.x0), reference.value_at(p.x0), 1e-2));

    let tv = TwoVolParams { drift_actions: vec![-1.0, 0.0, 1.0], ..TwoVolParams::default() };
    let spec = twovol(&tv)?;
    let m = MeasureSummary::dirac(&[0.0, spec.horizon], &spec.x0);
    for (k, &(x, z, w)) in [(0.0, 0.7, 0.5), (1.5, -2.0, 0.25), (-0.8, 0.0, 0.9)].iter().enumerate() {
        let lo = spec.cov(0.0, &[x], &m, 0);
        let hi = spec.cov(0.0, &[x], &m, 1);
        let target = lo * (1.0 - w) + hi * w;
        let fast = driver_f(&spec, 0.0, &[x], &[z], &target, &m)?.value;
        let brute = brute_force_f(&spec, 0.0, &[x], &[z], &target, &m, 40)?;
        rows.push(BenchRow::new(format!("twovol_driver_{k}"), fast, brute, 1e-3));
    }

    // with one action each the LQ model is a Brownian motion and the value is explicit
    let flat = LqParams { sigma: vec![1.0], alpha_max: 0.0, alpha_count: 1, ..LqParams::default() };
    let spec = lq(&flat)?;
    let mc = uncontrolled_reference(&spec, 100, 20_000, seed)?;
    let dt = flat.horizon / 100.0;
    let dev0 = (1.0 - flat.kappa) * flat.x0;
    let running: f64 = (0..100).map(|j| -0.5 * flat.q * (dev0 * dev0 + j as f64 * dt) * dt).sum();
    let exact = running - 0.5 * flat.g * (flat.x0 * flat.x0 + flat.horizon);
    rows.push(BenchRow::new("lq_uncontrolled_mc", mc.y0, exact, 3.0 * mc.se + 1e-3));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn riccati_without_coupling_is_the_scalar_riccati() {
        // kappa = 0, one volatility: P solves -P' = q - P^2 / r with P(T) = g, and
        // for q = r = g = 1 the solution is P = 1
        let p = LqParams { kappa: 0.0, sigma: vec![1.0], vol_cost: 0.0, ..LqParams::default() };
        let r = lq_riccati_reference(&p, 100).unwrap();
        assert!(r.p.iter().all(|v| (v - 1.0).abs() < 1e-9));
        assert!(r.eta.iter().all(|v| v.abs() < 1e-12));
        // mean decays like exp(-t); c(0) = T sigma^2 / 2
        assert!((r.mean[100] - (-1.0f64).exp()).abs() < 1e-8);
        assert!((r.value_at(1.0) + 0.5 + 0.5).abs() < 1e-8);
    }

    #[test]
    fn riccati_needs_enough_steps() {
        assert!(lq_riccati_reference(&LqParams::default(), 10).is_err());
    }

    #[test]
    fn brute_force_rejects_large_instances() {
        let spec = crate::builtin::lq(&LqParams::default()).unwrap();
        let m = MeasureSummary::dirac(&[0.0, 1.0], &[1.0]);
        let target = DMatrix::from_element(1, 1, 1.0);
        assert!(brute_force_f(&spec, 0.0, &[1.0], &[0.0], &target, &m, 10).is_err());
    }

    #[test]
    fn suite_passes() {
        let rows = suite(1).unwrap();
        assert!(rows.iter().all(|r| r.pass), "{rows:?}");
    }
}
