//! Feedback strategies and diffusion selections.

use std::borrow::Cow;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::bsde::RegressionFit;
use super::hjb::{SpaceGrid, ValueField};
use crate::error::{Error, Result};
use crate::hamiltonian::{MixedStrategy, PointTables};
use crate::model::{MeasureSummary, ModelSpec};

/// Diffusion law `b(t, x)` of a zero-drift test measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionSelection {
    Constant(usize),
    /// The same mixed strategy over diffusion actions at every `(t, x)`.
    Mixed(Vec<f64>),
    /// `below` when the first state coordinate is under `threshold`, `above` otherwise.
    Switching { threshold: f64, below: usize, above: usize },
}

impl DiffusionSelection {
    pub fn qb(&self, x: &[f64], kb: usize) -> Result<Vec<f64>> {
        let dirac = |b: usize| -> Result<Vec<f64>> {
            if b >= kb {
                return Err(Error::InvalidModel(format!("diffusion action {b} out of range")));
            }
            let mut q = vec![0.0; kb];
            q[b] = 1.0;
            Ok(q)
        };
        match self {
            DiffusionSelection::Constant(b) => dirac(*b),
            DiffusionSelection::Mixed(q) => {
                if q.len() != kb {
                    return Err(Error::InvalidModel(format!("mixture over {} actions, grid has {kb}", q.len())));
                }
                MixedStrategy::new(vec![1.0], q.clone())?;
                Ok(q.clone())
            }
            DiffusionSelection::Switching { threshold, below, above } => {
                dirac(if x[0] < *threshold { *below } else { *above })
            }
        }
    }
}

/// Maps `(time index, state)` to a mixed strategy.
#[derive(Debug, Clone)]
pub enum FeedbackControl {
    Constant(MixedStrategy),
    /// Nearest node in `x` on the value-field grid.
    Grid { times: Vec<f64>, grid: SpaceGrid, strategies: Vec<Vec<MixedStrategy>> },
    /// Driver maximizer at the regressed gradient, under the diffusion law of a
    /// selection.
    Regression {
        spec: Arc<ModelSpec>,
        measure: Arc<MeasureSummary>,
        fit: Arc<RegressionFit>,
        selection: DiffusionSelection,
    },
    /// Driver maximizer at the field's interpolated gradient, under the
    /// covariance of the nearest node's argmax.
    Pointwise { spec: Arc<ModelSpec>, field: Arc<ValueField> },
}

impl FeedbackControl {
    /// HJB argmax as Dirac strategies.
    pub fn from_value_field(vf: &ValueField) -> Self {
        let strategies = (0..vf.times.len())
            .map(|j| (0..vf.grid.points).map(|i| vf.strategy_at(j, i)).collect())
            .collect();
        FeedbackControl::Grid { times: vf.times.clone(), grid: vf.grid.clone(), strategies }
    }

    pub fn strategy(&self, j: usize, t: f64, x: &[f64]) -> Result<Cow<'_, MixedStrategy>> {
        match self {
            FeedbackControl::Constant(q) => Ok(Cow::Borrowed(q)),
            FeedbackControl::Grid { grid, strategies, .. } => {
                Ok(Cow::Borrowed(&strategies[j.min(strategies.len() - 1)][grid.nearest(x[0])]))
            }
            FeedbackControl::Regression { spec, measure, fit, selection } => {
                let z = fit.gradient(j, x);
                let tables = PointTables::new(spec, t, x, measure);
                let qb = selection.qb(x, spec.kb())?;
                let target = tables.mixed_cov(&qb);
                Ok(Cow::Owned(tables.driver(&z, &target)?.strategy))
            }
            FeedbackControl::Pointwise { spec, field } => {
                let j = j.min(field.steps().saturating_sub(1));
                let tables = PointTables::new(spec, t, x, &field.measure);
                let b = field.argmax[j][field.grid.nearest(x[0])].1;
                let target = tables.covs[b].clone();
                Ok(Cow::Owned(tables.driver(&[field.gradient_at(j, x[0])], &target)?.strategy))
            }
        }
    }

    /// Perturbation used to exhibit a strictly suboptimal control: on nodes with
    /// `i % 2 == 1` the drift action is replaced by the one with the worst payoff
    /// at the node's gradient.
    pub fn worst_half(&self, spec: &ModelSpec, vf: &ValueField) -> Result<Self> {
        let FeedbackControl::Grid { times, grid, strategies } = self else {
            return Err(Error::IncompatibleGrid("perturbation needs a grid control".into()));
        };
        let mut out = strategies.clone();
        for (j, row) in out.iter_mut().enumerate().take(times.len() - 1) {
            for (i, q) in row.iter_mut().enumerate().filter(|(i, _)| i % 2 == 1) {
                let tables = PointTables::new(spec, times[j], &[grid.x(i)], &vf.measure);
                let z = [vf.gradients[j][i]];
                let b = q.qb.iter().position(|&p| p > 0.0).unwrap_or(0);
                let worst = (0..tables.ka)
                    .min_by(|&a1, &a2| tables.payoff(a1, b, &z).total_cmp(&tables.payoff(a2, b, &z)))
                    .unwrap_or(0);
                *q = MixedStrategy::dirac(worst, b, tables.ka, tables.kb);
            }
        }
        Ok(FeedbackControl::Grid { times: times.clone(), grid: grid.clone(), strategies: out })
    }
}

/// Per node, the driver maximizer at the node gradient with the covariance of
/// the HJB argmax.
pub fn extract_feedback(spec: &ModelSpec, m: &MeasureSummary, vf: &ValueField) -> Result<FeedbackControl> {
    let l = vf.times.len() - 1;
    let mut strategies: Vec<Vec<MixedStrategy>> = Vec::with_capacity(l + 1);
    for j in 0..l {
        let mut row = Vec::with_capacity(vf.grid.points);
        for i in 0..vf.grid.points {
            let tables = PointTables::new(spec, vf.times[j], &[vf.grid.x(i)], m);
            let target: DMatrix<f64> = tables.covs[vf.argmax[j][i].1].clone();
            row.push(tables.driver(&[vf.gradients[j][i]], &target)?.strategy);
        }
        strategies.push(row);
    }
    strategies.push(strategies[l - 1].clone());
    Ok(FeedbackControl::Grid { times: vf.times.clone(), grid: vf.grid.clone(), strategies })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selections_map_to_probability_vectors() {
        assert_eq!(DiffusionSelection::Constant(1).qb(&[0.0], 3).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(DiffusionSelection::Mixed(vec![0.25, 0.75]).qb(&[0.0], 2).unwrap(), vec![0.25, 0.75]);
        let s = DiffusionSelection::Switching { threshold: 0.5, below: 0, above: 1 };
        assert_eq!(s.qb(&[0.0], 2).unwrap(), vec![1.0, 0.0]);
        assert_eq!(s.qb(&[0.9], 2).unwrap(), vec![0.0, 1.0]);
        assert!(DiffusionSelection::Constant(2).qb(&[0.0], 2).is_err());
        assert!(DiffusionSelection::Mixed(vec![1.0]).qb(&[0.0], 2).is_err());
    }

    #[test]
    fn selection_json_shape() {
        let s: DiffusionSelection = serde_json::from_str(r#"{"switching":{"threshold":0.0,"below":1,"above":0}}"#).unwrap();
        assert_eq!(s, DiffusionSelection::Switching { threshold: 0.0, below: 1, above: 0 });
        let s: DiffusionSelection = serde_json::from_str(r#"{"constant":1}"#).unwrap();
        assert_eq!(s, DiffusionSelection::Constant(1));
    }
}
