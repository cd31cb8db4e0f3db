//! Fast invariant and oracle checks behind `swarmfield validate`.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::config::{default_mixture, ExperimentConfig};
use crate::control::make_target;
use crate::error::Result;
use crate::experiment::run_experiment;
use crate::filters::{riccati_step, FilterState};
use crate::grid::{gradient, Grid, ScalarField, VectorField};
use crate::kde::{kde_density, NoiseModel};
use crate::pde::{assemble_fp_operator, assemble_gradient_operator, integration_op, step_density};
use crate::swarm::init_swarm;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    /// `PASS name: detail` or `FAIL name: detail`.
    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!("{tag} {}: {}", self.name, self.detail)
    }
}

fn generic_velocity(g: &Grid) -> VectorField {
    VectorField::from_fn(g, |x, y| (0.3 * (2.0 * x + y).sin(), -0.2 * (x * y).cos() + 0.1))
}

fn fp_columns() -> Result<Check> {
    let g = Grid::unit_square(30)?;
    let a = assemble_fp_operator(&generic_velocity(&g), 5e-5, &g)?;
    let worst = a.max_column_sum();
    Ok(Check::new("fp_column_sums", worst < 1e-12, format!("max |column sum| = {worst:.2e}")))
}

fn step_mass() -> Result<Check> {
    let g = Grid::unit_square(30)?;
    let a = assemble_fp_operator(&generic_velocity(&g), 5e-5, &g)?;
    let mut p = ScalarField::from_fn(&g, |x, y| 1.0 + 0.5 * (PI * x).cos() * (PI * y).cos());
    let m0 = p.mass();
    let mut drift: f64 = 0.0;
    for _ in 0..500 {
        p = step_density(&p, &a, 0.01)?;
        drift = drift.max((p.mass() - m0).abs());
    }
    Ok(Check::new("step_density_mass", drift <= 1e-12, format!("max mass drift = {drift:.2e}")))
}

fn riccati_oracle() -> Result<Check> {
    let a = DMatrix::<f64>::zeros(1, 1);
    let r = NoiseModel::constant(1, 1.0)?;
    let mut p = DMatrix::from_element(1, 1, 1.0);
    for _ in 0..1000 {
        p = riccati_step(&p, &a, &r, 0.0, 1e-3)?;
    }
    let err = (p[(0, 0)] - 0.5).abs();
    Ok(Check::new("riccati_scalar_oracle", err < 1e-6, format!("|P(1) - 1/2| = {err:.2e}")))
}

fn round_trip() -> Result<Check> {
    let g = Grid::unit_square(30)?;
    let f = ScalarField::from_fn(&g, |x, y| (PI * x).cos() * (PI * y).cos() + 2.0);
    let back = integration_op(&gradient(&f), f.mass())?;
    let num: f64 = back.values().iter().zip(f.values()).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = f.values().iter().map(|b| b * b).sum();
    let rel = (num / den).sqrt();
    Ok(Check::new("integration_round_trip", rel <= 1e-8, format!("relative error = {rel:.2e}")))
}

fn intertwining() -> Result<Check> {
    // A_g G = G A (I − Π); Π projects onto constants
    let g = Grid::unit_square(12)?;
    let ag = assemble_gradient_operator(&generic_velocity(&g), 2e-3, &g)?;
    let a = ag.fp_operator().to_dense();
    let gm = g.gradient_matrix();
    let mut gd = DMatrix::<f64>::zeros(gm.nrows(), gm.ncols());
    for (r, c, &v) in gm.triplet_iter() {
        gd[(r, c)] += v;
    }
    let n = g.len();
    let proj = DMatrix::from_element(n, n, 1.0 / n as f64);
    let lhs = ag.left_mul(&gd);
    let rhs = &gd * &a * (DMatrix::identity(n, n) - proj);
    let rel = (&lhs - &rhs).singular_values().max() / rhs.singular_values().max();
    Ok(Check::new("gradient_intertwining", rel <= 1e-10, format!("relative operator-norm gap = {rel:.2e}")))
}

fn kde_mass() -> Result<Check> {
    let g = Grid::unit_square(30)?;
    let swarm = init_swarm(1024, &crate::grid::Rect::new(0.15, 0.85, 0.15, 0.85)?, g.domain(), 1)?;
    let m = kde_density(swarm.positions(), 0.04, &g)?.mass();
    Ok(Check::new("kde_mass", (0.9..=1.0 + 1e-12).contains(&m), format!("mass = {m:.6}")))
}

fn target_density() -> Result<Check> {
    let g = Grid::unit_square(30)?;
    let t = make_target(&default_mixture(), &g, 0.2)?;
    let (m, lo) = (t.p_star().mass(), t.p_star().min());
    let ok = (m - 1.0).abs() < 1e-12 && lo >= 0.2 - 1e-12;
    Ok(Check::new("target_density", ok, format!("mass = {m:.15}, min = {lo:.4}")))
}

fn small(mode: &str, extra: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::parse(&format!(
        "mode = {mode}\ngrid.nx = 12\ngrid.ny = 12\nagents.n = 256\nkde.h = 0.08\ntime.t_end = 1\n\
         filter.riccati_every = 5\n{extra}"
    ))
}

fn filter_exact_start() -> Result<Check> {
    let log = run_experiment(&small("filter_only", "filter.init = truth")?)?;
    let worst = log.rows.iter().map(|r| r.err_est.max(r.err_grad)).fold(0.0, f64::max);
    Ok(Check::new("filter_exact_start", worst <= 1e-10, format!("max estimation error = {worst:.2e}")))
}

fn filter_mass() -> Result<Check> {
    let g = Grid::unit_square(12)?;
    let a = assemble_fp_operator(&generic_velocity(&g), 1e-3, &g)?;
    let p = ScalarField::constant(&g, 1.0);
    let r = NoiseModel::constant(g.len(), 1e-3)?;
    let mut state = FilterState::from_prior(p.values().to_vec(), &r)?;
    let y = ScalarField::from_fn(&g, |x, y| 1.0 + 0.3 * x * y);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        crate::filters::density_filter_step(&mut state, &y, &a, &r, 0.01, &Default::default())?;
        let m: f64 = state.estimate().iter().sum::<f64>() * g.cell_area();
        worst = worst.max((m - 1.0).abs());
    }
    Ok(Check::new("filter_mass", worst <= 1e-9, format!("max mass drift = {worst:.2e}")))
}

fn lyapunov_monotone() -> Result<Check> {
    let log = run_experiment(&ExperimentConfig::parse("mode = perfect_feedback\ntime.t_end = 10")?)?;
    let bad = log.rows.windows(2).filter(|w| w[1].lyapunov > w[0].lyapunov * (1.0 + 1e-12)).count();
    let detail = format!("{bad} increases over {} steps", log.rows.len() - 1);
    Ok(Check::new("perfect_feedback_lyapunov", bad == 0, detail))
}

fn determinism() -> Result<Check> {
    let c = small("interconnected", "seed = 11\ntime.t_end = 0.3")?;
    let same = run_experiment(&c)?.metrics_csv() == run_experiment(&c)?.metrics_csv();
    Ok(Check::new("determinism", same, format!("identical metrics: {same}")))
}

/// Runs every check; an error inside one check is reported as its failure.
pub fn run_validation() -> Vec<Check> {
    type CheckFn = fn() -> Result<Check>;
    let checks: [(&'static str, CheckFn); 11] = [
        ("fp_column_sums", fp_columns),
        ("step_density_mass", step_mass),
        ("riccati_scalar_oracle", riccati_oracle),
        ("integration_round_trip", round_trip),
        ("gradient_intertwining", intertwining),
        ("kde_mass", kde_mass),
        ("target_density", target_density),
        ("filter_mass", filter_mass),
        ("filter_exact_start", filter_exact_start),
        ("perfect_feedback_lyapunov", lyapunov_monotone),
        ("determinism", determinism),
    ];
    checks
        .into_iter()
        .map(|(name, f)| f().unwrap_or_else(|e| Check::new(name, false, format!("error: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for c in run_validation() {
            assert!(c.passed, "{}", c.line());
        }
    }
}
