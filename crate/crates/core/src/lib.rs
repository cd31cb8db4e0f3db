pub mod config;
pub mod control;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod filters;
pub mod grid;
pub mod io;
pub mod kde;
mod linalg;
pub mod pde;
pub mod swarm;
pub mod validate;

pub use config::{ExperimentConfig, Mode};
pub use control::{ControlConfig, TargetDensity, TargetSpec};
pub use diagnostics::MetricRow;
pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentLog};
pub use filters::{FilterSettings, FilterState};
pub use grid::{Grid, Rect, ScalarField, VectorField};
pub use kde::{KdeConfig, NoiseModel};
pub use pde::OperatorMatrix;
pub use swarm::Swarm;
