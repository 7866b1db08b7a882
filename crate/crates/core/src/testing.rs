//! Small models with closed-form values, shared by the unit tests.

use crate::builtin::{TableModel, Term};
use crate::model::{CoefficientBounds, ModelSpec};

fn poly(c: f64, x: u32) -> Vec<Term> {
    vec![Term { x: vec![x], ..Term::constant(c) }]
}

/// `dX = a sigma_b dt + sigma_b dW`, no running reward, terminal reward `-x^2`.
/// Under zero drift and volatility `s` the value is `-(x^2 + s^2 (T - t))`.
pub fn quadratic_terminal(drifts: &[f64], sigmas: &[f64]) -> ModelSpec {
    let smax = sigmas.iter().cloned().fold(0.0, f64::max);
    let amax = drifts.iter().map(|a| a.abs()).fold(0.0, f64::max);
    TableModel {
        dim_state: 1,
        noise_dim: 1,
        common_noise_dim: 0,
        x0: vec![1.0],
        horizon: 1.0,
        drift_actions: drifts.iter().map(|&a| vec![a]).collect(),
        diffusion_actions: sigmas.iter().map(|&s| vec![s]).collect(),
        lambda: drifts.iter().map(|&a| vec![poly(a, 0)]).collect(),
        sigma: sigmas.iter().map(|&s| vec![vec![poly(s, 0)]]).collect(),
        f: drifts.iter().map(|_| sigmas.iter().map(|_| poly(0.0, 0)).collect()).collect(),
        xi: poly(-1.0, 2),
        bounds: CoefficientBounds {
            drift_factor: amax,
            diffusion: smax,
            drift: amax * smax,
            running_cost: 0.0,
            terminal_cost: 100.0,
            lipschitz_x: Some(1e-9),
        },
        probe_box: vec![(-5.0, 5.0)],
    }
    .build()
    .expect("well-formed table")
}
