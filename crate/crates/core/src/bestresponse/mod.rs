//! The individual control problem against a frozen measure.

mod bsde;
mod feedback;
mod hjb;
mod simulate;

pub use bsde::{
    solve_bsde_fixed_measure, sup_over_measures, FixedMeasureBsdeResult, MemberValue, RegressionBasis,
    RegressionFit, SupResult,
};
pub use feedback::{extract_feedback, DiffusionSelection, FeedbackControl};
pub use hjb::{solve_hjb_grid, Scheme, SpaceGrid, ValueField};
pub use simulate::{
    draw_common_noise, simulate_forward, simulate_policy, simulate_selection, CommonNoiseMode, Policy,
};
