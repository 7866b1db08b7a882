//! Relaxed Hamiltonian, the covariance-constrained driver and its maximizer.
//!
//! For a product strategy `q = qa x qb` the Hamiltonian is bilinear, so at a fixed
//! diffusion marginal the best drift strategy is a pure action. The driver is
//! therefore a maximum over pure drift actions of one small linear program in
//! `qb` whose equality rows pin the mixed covariance to the target.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MeasureSummary, ModelSpec};
use crate::simplex::{phase_one, FeasibleBasis};

/// Membership tolerance for the covariance hull.
pub const HULL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedStrategy {
    pub qa: Vec<f64>,
    pub qb: Vec<f64>,
}

impl MixedStrategy {
    pub fn new(qa: Vec<f64>, qb: Vec<f64>) -> Result<Self> {
        let s = Self { qa, qb };
        s.check()?;
        Ok(s)
    }

    pub fn dirac(a: usize, b: usize, ka: usize, kb: usize) -> Self {
        let mut qa = vec![0.0; ka];
        let mut qb = vec![0.0; kb];
        qa[a] = 1.0;
        qb[b] = 1.0;
        Self { qa, qb }
    }

    pub fn check(&self) -> Result<()> {
        for (name, w) in [("qa", &self.qa), ("qb", &self.qb)] {
            if w.is_empty() || w.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::InvalidModel(format!("{name} must be nonnegative and nonempty")));
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidModel(format!("{name} sums to {s}")));
            }
        }
        Ok(())
    }

    /// Support as `(a, b)` pairs with positive joint mass.
    pub fn support(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, &pa) in self.qa.iter().enumerate() {
            for (b, &pb) in self.qb.iter().enumerate() {
                if pa > 0.0 && pb > 0.0 {
                    out.push((a, b));
                }
            }
        }
        out
    }
}

/// Coefficients at one `(t, x, m)` tabulated over the action grids.
#[derive(Debug, Clone)]
pub struct PointTables {
    pub ka: usize,
    pub kb: usize,
    pub dim: usize,
    /// `sigma(b) lambda(a)` at `[(a * kb + b) * dim ..]`.
    pub drift: Vec<f64>,
    /// `f(a, b)` at `[a * kb + b]`.
    pub cost: Vec<f64>,
    /// `sigma sigma^T (b)`.
    pub covs: Vec<DMatrix<f64>>,
}

impl PointTables {
    pub fn new(spec: &ModelSpec, t: f64, x: &[f64], m: &MeasureSummary) -> Self {
        let (ka, kb, d) = (spec.ka(), spec.kb(), spec.dim_state);
        let sigmas: Vec<DMatrix<f64>> = (0..kb).map(|b| spec.sigma(t, x, m, b)).collect();
        let lambdas: Vec<DVector<f64>> = (0..ka).map(|a| spec.lambda(t, x, m, a)).collect();
        let mut drift = Vec::with_capacity(ka * kb * d);
        let mut cost = Vec::with_capacity(ka * kb);
        for (a, lam) in lambdas.iter().enumerate() {
            for (b, sig) in sigmas.iter().enumerate() {
                drift.extend((sig * lam).iter());
                cost.push(spec.cost(t, x, m, a, b));
            }
        }
        let covs = sigmas.iter().map(|s| crate::model::symmetrize(&(s * s.transpose()))).collect();
        Self { ka, kb, dim: d, drift, cost, covs }
    }

    pub fn drift_at(&self, a: usize, b: usize) -> &[f64] {
        let base = (a * self.kb + b) * self.dim;
        &self.drift[base..base + self.dim]
    }

    /// `f(a, b) + z . sigma lambda (a, b)`
    pub fn payoff(&self, a: usize, b: usize, z: &[f64]) -> f64 {
        self.cost[a * self.kb + b] + self.drift_at(a, b).iter().zip(z).map(|(u, v)| u * v).sum::<f64>()
    }

    pub fn hamiltonian(&self, z: &[f64], q: &MixedStrategy) -> f64 {
        let mut h = 0.0;
        for (a, &pa) in q.qa.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            for (b, &pb) in q.qb.iter().enumerate() {
                if pb != 0.0 {
                    h += pa * pb * self.payoff(a, b, z);
                }
            }
        }
        h
    }

    /// `sum_b qb_b sigma sigma^T(b)`
    pub fn mixed_cov(&self, qb: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        qb.iter().zip(&self.covs).fold(DMatrix::zeros(d, d), |acc, (w, c)| acc + c * *w)
    }

    /// Largest `|sigma lambda|` over the grid.
    pub fn max_drift_norm(&self) -> f64 {
        self.drift.chunks(self.dim).map(|v| v.iter().map(|u| u * u).sum::<f64>().sqrt()).fold(0.0, f64::max)
    }

    /// Rows pinning the upper triangle of the mixed covariance, then the mass row.
    fn hull_system(&self, target: &DMatrix<f64>) -> (Vec<Vec<f64>>, Vec<f64>) {
        let d = self.dim;
        let mut a = Vec::new();
        let mut rhs = Vec::new();
        for r in 0..d {
            for c in r..d {
                a.push(self.covs.iter().map(|s| s[(r, c)]).collect());
                rhs.push(0.5 * (target[(r, c)] + target[(c, r)]));
            }
        }
        a.push(vec![1.0; self.kb]);
        rhs.push(1.0);
        (a, rhs)
    }

    pub fn feasibility(&self, target: &DMatrix<f64>) -> (FeasibilityResult, Option<FeasibleBasis>) {
        let (a, rhs) = self.hull_system(target);
        let fb = phase_one(&a, &rhs);
        if fb.infeasibility <= HULL_TOL {
            let w = normalize(fb.point());
            let gap = (self.mixed_cov(&w) - target).norm();
            (FeasibilityResult { feasible: true, weights: w, gap }, Some(fb))
        } else {
            let (w, gap) = closest_hull_point(&self.covs, target);
            (FeasibilityResult { feasible: false, weights: w, gap }, None)
        }
    }

    /// Constrained driver from tabulated coefficients.
    pub fn driver(&self, z: &[f64], target: &DMatrix<f64>) -> Result<DriverEvaluation> {
        if self.dim == 1 {
            return self.driver_scalar(z, target[(0, 0)]);
        }
        let (feas, basis) = self.feasibility(target);
        let Some(basis) = basis else {
            return Err(Error::InfeasibleSigma { gap: feas.gap });
        };
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for a in 0..self.ka {
            let c: Vec<f64> = (0..self.kb).map(|b| self.payoff(a, b, z)).collect();
            let (qb, v) = basis.maximize(&c).expect("bounded: qb lives in the simplex");
            if best.as_ref().is_none_or(|(bv, _, _)| v > *bv) {
                best = Some((v, a, qb));
            }
        }
        let (_, a_star, qb) = best.expect("drift grid is nonempty");
        let qb = normalize(qb);
        let mut qa = vec![0.0; self.ka];
        qa[a_star] = 1.0;
        let strategy = MixedStrategy { qa, qb };
        let value = self.hamiltonian(z, &strategy);
        let feasibility_gap = (self.mixed_cov(&strategy.qb) - target).norm();
        Ok(DriverEvaluation { value, strategy, feasibility_gap })
    }
}

impl PointTables {
    /// One-dimensional state: the vertices of `{qb : sum qb s_b = target}` carry
    /// at most two atoms, one on each side of the target, so they are enumerated.
    fn driver_scalar(&self, z: &[f64], target: f64) -> Result<DriverEvaluation> {
        let s: Vec<f64> = self.covs.iter().map(|c| c[(0, 0)]).collect();
        let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if target < lo - HULL_TOL || target > hi + HULL_TOL {
            return Err(Error::InfeasibleSigma { gap: (lo - target).max(target - hi) });
        }
        let sig = target.clamp(lo, hi);
        let mut vertices: Vec<(usize, usize, f64)> = Vec::new();
        for (b, &sb) in s.iter().enumerate() {
            if (sb - sig).abs() <= HULL_TOL {
                vertices.push((b, b, 0.0));
            }
        }
        for (b1, &s1) in s.iter().enumerate() {
            for (b2, &s2) in s.iter().enumerate() {
                if s1 < sig - HULL_TOL && s2 > sig + HULL_TOL {
                    vertices.push((b1, b2, (sig - s1) / (s2 - s1)));
                }
            }
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..self.ka {
            let pay: Vec<f64> = (0..self.kb).map(|b| self.payoff(a, b, z)).collect();
            for (k, &(b1, b2, w)) in vertices.iter().enumerate() {
                let v = (1.0 - w) * pay[b1] + w * pay[b2];
                if best.is_none_or(|(bv, _, _)| v > bv) {
                    best = Some((v, a, k));
                }
            }
        }
        let (_, a_star, k) = best.expect("a feasible target has a vertex");
        let (b1, b2, w) = vertices[k];
        let mut qa = vec![0.0; self.ka];
        qa[a_star] = 1.0;
        let mut qb = vec![0.0; self.kb];
        qb[b1] += 1.0 - w;
        qb[b2] += w;
        let strategy = MixedStrategy { qa, qb };
        let value = self.hamiltonian(z, &strategy);
        let feasibility_gap = (self.mixed_cov(&strategy.qb)[(0, 0)] - target).abs();
        Ok(DriverEvaluation { value, strategy, feasibility_gap })
    }
}

fn normalize(mut w: Vec<f64>) -> Vec<f64> {
    w.iter_mut().for_each(|v| *v = v.max(0.0));
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Closest point of the convex hull of `covs` to `target` in Frobenius norm,
/// by enumerating supports of size at most (number of free entries + 1).
fn closest_hull_point(covs: &[DMatrix<f64>], target: &DMatrix<f64>) -> (Vec<f64>, f64) {
    let k = covs.len();
    let d = target.nrows();
    let max_support = (d * (d + 1) / 2 + 1).min(k);
    let flat = |m: &DMatrix<f64>| DVector::from_iterator(d * d, m.iter().copied());
    let vs: Vec<DVector<f64>> = covs.iter().map(flat).collect();
    let s = flat(target);
    let mut best = (vec![0.0; k], f64::INFINITY);
    let mut subset = Vec::new();
    fn visit(
        start: usize,
        k: usize,
        max_support: usize,
        subset: &mut Vec<usize>,
        f: &mut dyn FnMut(&[usize]),
    ) {
        if !subset.is_empty() {
            f(subset);
        }
        if subset.len() == max_support {
            return;
        }
        for i in start..k {
            subset.push(i);
            visit(i + 1, k, max_support, subset, f);
            subset.pop();
        }
    }
    visit(0, k, max_support, &mut subset, &mut |sub: &[usize]| {
        let base = &vs[sub[0]];
        let mut w = vec![0.0; k];
        if sub.len() == 1 {
            w[sub[0]] = 1.0;
        } else {
            let cols: Vec<DVector<f64>> = sub[1..].iter().map(|&i| &vs[i] - base).collect();
            let a = DMatrix::from_columns(&cols);
            let rhs = &s - base;
            let Ok(mu) = a.clone().svd(true, true).solve(&rhs, 1e-13) else { return };
            let mu0 = 1.0 - mu.sum();
            if mu0 < -1e-12 || mu.iter().any(|&v| v < -1e-12) {
                return;
            }
            w[sub[0]] = mu0.max(0.0);
            for (j, &i) in sub[1..].iter().enumerate() {
                w[i] = mu[j].max(0.0);
            }
        }
        let w = normalize(w);
        let p = w.iter().zip(&vs).fold(DVector::zeros(d * d), |acc, (wi, v)| acc + v * *wi);
        let gap = (p - &s).norm();
        if gap < best.1 - 1e-15 {
            best = (w, gap);
        }
    });
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityResult {
    pub feasible: bool,
    /// Hull weights reproducing the target when feasible, closest point otherwise.
    pub weights: Vec<f64>,
    /// Frobenius distance between `sum_b w_b sigma sigma^T(b)` and the target.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverEvaluation {
    pub value: f64,
    pub strategy: MixedStrategy,
    pub feasibility_gap: f64,
}

pub fn hamiltonian_h(
    spec: &ModelSpec,
    t: f64,
    x: &[f64],
    z: &[f64],
    m: &MeasureSummary,
    q: &MixedStrategy,
) -> f64 {
    PointTables::new(spec, t, x, m).hamiltonian(z, q)
}

pub fn sigma_hull_feasible(
    spec: &ModelSpec,
    t: f64,
    x: &[f64],
    m: &MeasureSummary,
    target: &DMatrix<f64>,
) -> FeasibilityResult {
    PointTables::new(spec, t, x, m).feasibility(target).0
}

pub fn driver_f(
    spec: &ModelSpec,
    t: f64,
    x: &[f64],
    z: &[f64],
    target: &DMatrix<f64>,
    m: &MeasureSummary,
) -> Result<DriverEvaluation> {
    PointTables::new(spec, t, x, m).driver(z, target)
}

/// `|F(z1) - F(z2)| / |z1 - z2|`.
pub fn lipschitz_probe_f(
    spec: &ModelSpec,
    t: f64,
    x: &[f64],
    target: &DMatrix<f64>,
    m: &MeasureSummary,
    z1: &[f64],
    z2: &[f64],
) -> Result<f64> {
    let tables = PointTables::new(spec, t, x, m);
    let f1 = tables.driver(z1, target)?.value;
    let f2 = tables.driver(z2, target)?.value;
    let dz = z1.iter().zip(z2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if dz == 0.0 {
        return Err(Error::InvalidModel("Lipschitz probe needs z1 != z2".into()));
    }
    Ok((f1 - f2).abs() / dz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin::{twovol, TableModel, TwoVolParams};
    use proptest::prelude::*;

    fn at_origin(spec: &ModelSpec) -> (MeasureSummary, Vec<f64>) {
        let d = spec.dim_state;
        (MeasureSummary::dirac(&[0.0, 1.0], &vec![0.0; d]), vec![0.0; d])
    }

    #[test]
    fn dirac_hamiltonian_is_the_payoff() {
        let spec = TableModel::random_constant(1, 2, 3, 2).build().unwrap();
        let (m, x) = at_origin(&spec);
        let tables = PointTables::new(&spec, 0.0, &x, &m);
        let z = [0.3, -1.2];
        for a in 0..3 {
            for b in 0..2 {
                let q = MixedStrategy::dirac(a, b, 3, 2);
                assert!((tables.hamiltonian(&z, &q) - tables.payoff(a, b, &z)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_vol_driver_by_hand() {
        // drift actions {-1, 0, 1}, sigma in {1, 2}: at x = 0 the target 2.5 forces qb = (1/2, 1/2)
        let spec = twovol(&TwoVolParams { drift_actions: vec![-1.0, 0.0, 1.0], ..TwoVolParams::default() }).unwrap();
        let m = MeasureSummary::dirac(&[0.0, 1.0], &[0.0]);
        let target = DMatrix::from_element(1, 1, 2.5);
        let ev = driver_f(&spec, 0.0, &[0.0], &[0.7], &target, &m).unwrap();
        assert!((ev.value - 1.05).abs() < 1e-12);
        assert!((ev.strategy.qb[0] - 0.5).abs() < 1e-12);
        assert_eq!(ev.strategy.qa, vec![0.0, 0.0, 1.0]);
        let ev = driver_f(&spec, 0.0, &[0.0], &[-2.0], &DMatrix::from_element(1, 1, 4.0), &m).unwrap();
        assert!((ev.value - 4.0).abs() < 1e-12);
    }

    #[test]
    fn target_outside_hull_is_rejected() {
        let spec = twovol(&TwoVolParams::default()).unwrap();
        let m = MeasureSummary::dirac(&[0.0, 1.0], &[0.0]);
        let err = driver_f(&spec, 0.0, &[0.0], &[1.0], &DMatrix::from_element(1, 1, 9.0), &m).unwrap_err();
        match err {
            Error::InfeasibleSigma { gap } => assert!((gap - 5.0).abs() < 1e-9),
            other => panic!("unexpected {other:?}"),
        }
        assert!(!sigma_hull_feasible(&spec, 0.0, &[0.0], &m, &DMatrix::from_element(1, 1, 0.5)).feasible);
    }

    #[test]
    fn mixed_strategy_rejects_bad_weights() {
        assert!(MixedStrategy::new(vec![0.5, 0.6], vec![1.0]).is_err());
        assert!(MixedStrategy::new(vec![-0.1, 1.1], vec![1.0]).is_err());
        assert_eq!(MixedStrategy::dirac(1, 0, 2, 2).support(), vec![(1, 0)]);
    }

    fn simplex_point(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn driver_dominates_feasible_mixtures(
            seed in 0u64..1000,
            dim in 1usize..=2,
            ka in 1usize..=5,
            kb in 1usize..=5,
            raw_a in proptest::collection::vec(0.01..1.0f64, 5),
            raw_b in proptest::collection::vec(0.01..1.0f64, 5),
            z in proptest::collection::vec(-3.0..3.0f64, 2),
        ) {
            let spec = TableModel::random_constant(seed, dim, ka, kb).build().unwrap();
            let (m, x) = at_origin(&spec);
            let tables = PointTables::new(&spec, 0.0, &x, &m);
            let q = MixedStrategy::new(simplex_point(&raw_a[..ka]), simplex_point(&raw_b[..kb])).unwrap();
            let target = tables.mixed_cov(&q.qb);
            let ev = tables.driver(&z[..dim], &target).unwrap();
            prop_assert!(tables.hamiltonian(&z[..dim], &q) <= ev.value + 1e-9);
            // the selector is feasible and attains the value
            prop_assert!(ev.feasibility_gap <= 1e-8);
            prop_assert!((tables.mixed_cov(&ev.strategy.qb) - &target).norm() <= 1e-8);
            prop_assert!((tables.hamiltonian(&z[..dim], &ev.strategy) - ev.value).abs() <= 1e-10);
        }

        #[test]
        fn driver_is_lipschitz_in_z(
            seed in 0u64..1000,
            dim in 1usize..=2,
            raw_b in proptest::collection::vec(0.01..1.0f64, 3),
            z1 in proptest::collection::vec(-3.0..3.0f64, 2),
            z2 in proptest::collection::vec(-3.0..3.0f64, 2),
        ) {
            let spec = TableModel::random_constant(seed, dim, 4, 3).build().unwrap();
            let (m, x) = at_origin(&spec);
            let tables = PointTables::new(&spec, 0.0, &x, &m);
            prop_assume!(z1[..dim] != z2[..dim]);
            let target = tables.mixed_cov(&simplex_point(&raw_b));
            let ratio = lipschitz_probe_f(&spec, 0.0, &x, &target, &m, &z1[..dim], &z2[..dim]).unwrap();
            prop_assert!(ratio <= tables.max_drift_norm() + 1e-9);
        }
    }
}
