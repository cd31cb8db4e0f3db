//! Discrete Fokker–Planck dynamics for the density and its gradient.

mod fokker_planck;
mod gradient;
mod integration;

pub use fokker_planck::{
    assemble_fp_operator, assemble_fp_operator_with, step_density, step_density_with_safety, steady_state_residual, DiffusionSchedule,
    Flux, OperatorMatrix, CFL_SAFETY,
};
pub use gradient::{assemble_gradient_operator, GradientOperator};
pub use integration::{integration_op, IntegrationOperator};
