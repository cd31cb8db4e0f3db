//! The closed-loop orchestrator and its run modes.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::config::{ExperimentConfig, FilterInit, Mode};
use crate::control::{exact_feedback_velocity, feedback_drive, feedback_velocity, make_target, ControlConfig, TargetDensity};
use crate::diagnostics::{l2, l2_vector, lyapunov_v, metrics_csv, trailing_mean, MetricRow};
use crate::error::{Error, Result};
use crate::filters::{density_filter_step, gradient_filter_step, FilterState};
use crate::grid::{gradient, Grid, ScalarField, VectorField};
use crate::io::{write_snapshot, write_text};
use crate::kde::{kde_measurements, noise_cov_density, noise_cov_gradient, KdeConfig};
use crate::pde::{assemble_fp_operator_with, step_density, GradientOperator, IntegrationOperator, OperatorMatrix};
use crate::swarm::{init_swarm, step_swarm, Swarm};

/// Fraction of a run treated as steady state.
pub const STEADY_WINDOW: f64 = 0.2;

#[derive(Clone, Debug, Default)]
pub struct ExperimentLog {
    pub rows: Vec<MetricRow>,
    /// Mass of the reference PDE density after every step.
    pub truth_mass: Vec<f64>,
    /// Hash of the velocity field seen by the agents and by the reference
    /// PDE at every step; the two consumers must agree.
    pub velocity_checksums: Vec<u64>,
    pub snapshots: Vec<PathBuf>,
    /// `(δ, steady tracking error)` for ISS sweeps.
    pub sweep: Vec<(f64, f64)>,
    pub config_echo: String,
    pub wall_time: Duration,
}

impl ExperimentLog {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.rows)
    }

    pub fn series(&self, f: impl Fn(&MetricRow) -> f64) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.t, f(r))).collect()
    }
}

/// Bitwise hash of a velocity field.
pub fn velocity_checksum(v: &VectorField) -> u64 {
    let mut h = DefaultHasher::new();
    for c in v.x().iter().chain(v.y()) {
        c.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Uniform density on `region`, with partial cells weighted by overlap.
pub fn initial_density(grid: &Grid, region: &crate::grid::Rect) -> Result<ScalarField> {
    let overlap = |c: f64, h: f64, lo: f64, hi: f64| ((c + h / 2.0).min(hi) - (c - h / 2.0).max(lo)).max(0.0) / h;
    let p = ScalarField::from_fn(grid, |x, y| {
        overlap(x, grid.dx(), region.x_min, region.x_max) * overlap(y, grid.dy(), region.y_min, region.y_max)
    });
    let m = p.mass();
    if !(m > 0.0) {
        return Err(Error::Config("initial region covers no cell".into()));
    }
    Ok(&p * (1.0 / m))
}

struct Setup {
    grid: Grid,
    target: TargetDensity,
    control: ControlConfig,
}

fn setup(config: &ExperimentConfig) -> Result<Setup> {
    config.validate()?;
    let grid = config.grid()?;
    Ok(Setup {
        target: make_target(&config.target, &grid, config.p_min)?,
        control: ControlConfig::new(config.alpha, config.v_max)?,
        grid,
    })
}

struct Output<'a> {
    dir: Option<&'a Path>,
    every: usize,
    pgm: bool,
    agents: bool,
    written: Vec<PathBuf>,
}

impl<'a> Output<'a> {
    fn new(config: &'a ExperimentConfig) -> Result<Self> {
        let dir = config.output_dir.as_deref();
        if let Some(d) = dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(Self {
            dir,
            every: config.snapshot_every,
            pgm: config.pgm,
            agents: config.dump_agents,
            written: Vec::new(),
        })
    }

    fn due(&self, step: usize) -> bool {
        self.dir.is_some() && self.every > 0 && step % self.every == 0
    }

    fn fields(&mut self, step: usize, fields: &[(&str, &ScalarField)], swarm: Option<&Swarm>) -> Result<()> {
        let Some(dir) = self.dir else { return Ok(()) };
        for (name, f) in fields {
            let stem = format!("{name}_{step:06}");
            write_snapshot(dir, &stem, f, self.pgm)?;
            self.written.push(dir.join(format!("{stem}.txt")));
        }
        if let (true, Some(s)) = (self.agents, swarm) {
            let path = dir.join(format!("agents_{step:06}.txt"));
            write_text(&path, &s.to_text())?;
            self.written.push(path);
        }
        Ok(())
    }

    fn finish(&self, log: &ExperimentLog) -> Result<()> {
        let Some(dir) = self.dir else { return Ok(()) };
        if !log.rows.is_empty() {
            write_text(&dir.join("metrics.csv"), &log.metrics_csv())?;
        }
        if !log.sweep.is_empty() {
            let mut s = String::from("delta,steady_error\n");
            for (d, e) in &log.sweep {
                let _ = writeln!(s, "{d:.12e},{e:.12e}");
            }
            write_text(&dir.join("sweep.csv"), &s)?;
        }
        write_text(&dir.join("config.echo"), &log.config_echo)?;
        let summary = format!(
            "steps {}\nsnapshots {}\nwall_time_s {:.3}\n",
            log.rows.len().saturating_sub(1),
            log.snapshots.len(),
            log.wall_time.as_secs_f64()
        );
        write_text(&dir.join("run_summary.txt"), &summary)
    }
}

/// Runs the configured mode and, when `output_dir` is set, writes the
/// metrics table, snapshots and a config echo there.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentLog> {
    let start = Instant::now();
    let mut out = Output::new(config)?;
    let mut log = match config.mode {
        Mode::Interconnected => run_interconnected(config, &mut out)?,
        Mode::PerfectFeedback => run_perfect_feedback(config, 0.0, &mut out)?,
        Mode::FilterOnly => run_filter_only(config, &mut out)?,
        Mode::IssSweep => ExperimentLog {
            sweep: iss_sweep(config, &config.iss_deltas)?,
            ..Default::default()
        },
    };
    log.snapshots = std::mem::take(&mut out.written);
    log.config_echo = config.echo();
    log.wall_time = start.elapsed();
    out.finish(&log)?;
    Ok(log)
}

fn density_row(step: usize, t: f64, p: &ScalarField, target: &TargetDensity) -> Result<MetricRow> {
    Ok(MetricRow {
        step,
        t,
        err_track: l2(&(p - target.p_star())),
        err_est: 0.0,
        err_grad: 0.0,
        lyapunov: lyapunov_v(p, target)?,
        mass: p.mass(),
        kde_err: None,
    })
}

fn check_row(row: &MetricRow) -> Result<()> {
    if row.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("metrics").at_step(row.step))
    }
}

/// Unit-L² shapes of the injected estimation errors.
fn injection_shapes(grid: &Grid) -> (ScalarField, VectorField) {
    use std::f64::consts::PI;
    let d = grid.domain();
    let (w, h) = (d.width(), d.height());
    let e = ScalarField::from_fn(grid, |x, y| (PI * (x - d.x_min) / w).cos() * (PI * (y - d.y_min) / h).cos());
    let eg = VectorField::from_fn(grid, |x, y| {
        let (u, v) = (PI * (x - d.x_min) / w, PI * (y - d.y_min) / h);
        (u.sin() * (2.0 * v).cos(), (2.0 * u).cos() * v.sin())
    });
    (&e * (1.0 / l2(&e)), &eg * (1.0 / l2_vector(&eg)))
}

/// Reference PDE under the exact-density law, optionally with injected
/// estimation errors of L² size `delta` entering through the estimate law.
fn run_perfect_feedback(config: &ExperimentConfig, delta: f64, out: &mut Output) -> Result<ExperimentLog> {
    let s = setup(config)?;
    let mut p = initial_density(&s.grid, &config.init_region)?;
    let disturbance = if delta > 0.0 {
        let (e, eg) = injection_shapes(&s.grid);
        Some(feedback_drive(&(&e * delta), &(&eg * delta), &s.target, s.control.alpha)?)
    } else {
        None
    };
    let mut log = ExperimentLog::default();
    let n = config.steps();
    for k in 0..=n {
        let row = density_row(k, k as f64 * config.dt, &p, &s.target)?;
        check_row(&row)?;
        log.rows.push(row);
        if out.due(k) {
            out.fields(k, &[("p", &p)], None)?;
        }
        if k == n {
            break;
        }
        let mut v = exact_feedback_velocity(&p, &s.target, &s.control, config.sigma).map_err(|e| e.at_step(k))?;
        if let Some(d) = &disturbance {
            v = &v + d;
        }
        let a = assemble_fp_operator_with(&v, config.sigma, &s.grid, config.flux).map_err(|e| e.at_step(k))?;
        p = step_density(&p, &a, config.dt).map_err(|e| e.at_step(k))?;
        log.truth_mass.push(p.mass());
    }
    Ok(log)
}

/// Steady tracking error (trailing-window mean of `‖p − p_*‖`) of the
/// perfect-feedback loop for each injected error size.
pub fn iss_sweep(config: &ExperimentConfig, deltas: &[f64]) -> Result<Vec<(f64, f64)>> {
    if deltas.iter().any(|d| !(*d >= 0.0)) || deltas.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::param("deltas", "must be nonnegative and ascending"));
    }
    let mut quiet = config.clone();
    quiet.output_dir = None;
    quiet.mode = Mode::PerfectFeedback;
    let mut out = Output::new(&quiet)?;
    deltas
        .iter()
        .map(|&d| {
            let log = run_perfect_feedback(&quiet, d, &mut out)?;
            let errs: Vec<f64> = log.rows.iter().map(|r| r.err_track).collect();
            Ok((d, trailing_mean(&errs, STEADY_WINDOW)))
        })
        .collect()
}

struct Filters {
    density: FilterState,
    gradient: FilterState,
}

impl Filters {
    fn step(
        &mut self,
        config: &ExperimentConfig,
        y: &ScalarField,
        y_g: &VectorField,
        a: &OperatorMatrix,
        a_g: &GradientOperator,
        r: &crate::kde::NoiseModel,
        r_g: &crate::kde::NoiseModel,
    ) -> Result<()> {
        let (d, g) = rayon::join(
            || density_filter_step(&mut self.density, y, a, r, config.dt, &config.filter),
            || gradient_filter_step(&mut self.gradient, y_g, a_g, r_g, config.dt, &config.filter),
        );
        d.and(g)
    }

    fn estimates(&self, grid: &Grid) -> Result<(ScalarField, VectorField)> {
        Ok((
            ScalarField::from_values(grid, self.density.estimate().to_vec())?,
            VectorField::from_stacked(grid, self.gradient.estimate())?,
        ))
    }
}

fn estimate_row(
    step: usize,
    t: f64,
    p_hat: &ScalarField,
    q_hat: &VectorField,
    truth: &ScalarField,
    kde: Option<&ScalarField>,
    target: &TargetDensity,
) -> Result<MetricRow> {
    Ok(MetricRow {
        step,
        t,
        err_track: l2(&(p_hat - target.p_star())),
        err_est: l2(&(p_hat - truth)),
        err_grad: l2_vector(&(q_hat - &gradient(truth))),
        lyapunov: lyapunov_v(p_hat, target)?,
        mass: p_hat.mass(),
        kde_err: kde.map(|y| l2(&(y - truth))),
    })
}

/// The interconnected loop. Every step: KDE measurements, generators from
/// the previous velocity, both filter steps, the estimate-based law, the
/// agent step and the reference PDE step under the same velocity.
fn run_interconnected(config: &ExperimentConfig, out: &mut Output) -> Result<ExperimentLog> {
    let s = setup(config)?;
    let kde = KdeConfig::new(config.kde_h, config.n_agents, config.floor_eps)?;
    let integrator = Arc::new(IntegrationOperator::new(&s.grid)?);
    let mut swarm = init_swarm(config.n_agents, &config.init_region, s.grid.domain(), config.seed)?;
    let mut p = initial_density(&s.grid, &config.init_region)?;

    let (y0, yg0) = kde_measurements(swarm.positions(), config.kde_h, &s.grid)?;
    let p_hat0 = &y0 * (1.0 / y0.mass());
    let mut filters = Filters {
        density: FilterState::from_prior(p_hat0.into_values(), &noise_cov_density(&y0, &kde))?,
        gradient: FilterState::from_prior(yg0.to_stacked(), &noise_cov_gradient(&yg0, &kde))?,
    };
    let (p_hat, q_hat) = filters.estimates(&s.grid)?;
    let mut v = feedback_velocity(&p_hat, &q_hat, &s.target, &s.control, config.sigma)?;
    let mut a = assemble_fp_operator_with(&v, config.sigma, &s.grid, config.flux)?;

    let mut log = ExperimentLog::default();
    let n = config.steps();
    for k in 0..=n {
        let at = |e: Error| e.at_step(k);
        let (y, y_g) = if k == 0 {
            (y0.clone(), yg0.clone())
        } else {
            kde_measurements(swarm.positions(), config.kde_h, &s.grid).map_err(at)?
        };
        let (p_hat, q_hat) = filters.estimates(&s.grid)?;
        let row = estimate_row(k, k as f64 * config.dt, &p_hat, &q_hat, &p, Some(&y), &s.target)?;
        check_row(&row)?;
        log.rows.push(row);
        if out.due(k) {
            let speed = v.magnitude();
            out.fields(k, &[("p_hat", &p_hat), ("p", &p), ("p_kde", &y), ("speed", &speed)], Some(&swarm))?;
        }
        if k == n {
            break;
        }

        let a_g = GradientOperator::new(a.clone(), Arc::clone(&integrator), 1.0);
        let (r, r_g) = (noise_cov_density(&y, &kde), noise_cov_gradient(&y_g, &kde));
        filters.step(config, &y, &y_g, &a, &a_g, &r, &r_g).map_err(at)?;

        let (p_hat, q_hat) = filters.estimates(&s.grid)?;
        v = feedback_velocity(&p_hat, &q_hat, &s.target, &s.control, config.sigma).map_err(at)?;

        let for_agents = velocity_checksum(&v);
        step_swarm(&mut swarm, &v, config.sigma, config.dt).map_err(at)?;
        let for_truth = velocity_checksum(&v);
        a = assemble_fp_operator_with(&v, config.sigma, &s.grid, config.flux).map_err(at)?;
        p = step_density(&p, &a, config.dt).map_err(at)?;
        if for_agents != for_truth {
            return Err(Error::Config("agents and reference PDE saw different velocities".into()).at_step(k));
        }
        log.velocity_checksums.push(for_agents);
        log.truth_mass.push(p.mass());
    }
    Ok(log)
}

/// Filters fed with the exact density and gradient (`w = 0`) while the
/// reference PDE runs under the exact-density law.
fn run_filter_only(config: &ExperimentConfig, out: &mut Output) -> Result<ExperimentLog> {
    let s = setup(config)?;
    let kde = KdeConfig::new(config.kde_h, config.n_agents, config.floor_eps)?;
    let integrator = Arc::new(IntegrationOperator::new(&s.grid)?);
    let mut p = initial_density(&s.grid, &config.init_region)?;

    // the prior covariance is the noise covariance of whatever produced the prior
    let (y, yg) = match config.filter_init {
        FilterInit::Truth => (p.clone(), gradient(&p)),
        FilterInit::Kde => {
            let swarm = init_swarm(config.n_agents, &config.init_region, s.grid.domain(), config.seed)?;
            kde_measurements(swarm.positions(), config.kde_h, &s.grid)?
        }
    };
    let mut filters = Filters {
        density: FilterState::from_prior((&y * (1.0 / y.mass())).into_values(), &noise_cov_density(&y, &kde))?,
        gradient: FilterState::from_prior(yg.to_stacked(), &noise_cov_gradient(&yg, &kde))?,
    };

    let mut log = ExperimentLog::default();
    let n = config.steps();
    for k in 0..=n {
        let at = |e: Error| e.at_step(k);
        let (p_hat, q_hat) = filters.estimates(&s.grid)?;
        let mut row = estimate_row(k, k as f64 * config.dt, &p_hat, &q_hat, &p, None, &s.target)?;
        row.err_track = l2(&(&p - s.target.p_star()));
        row.lyapunov = lyapunov_v(&p, &s.target)?;
        check_row(&row)?;
        log.rows.push(row);
        if out.due(k) {
            out.fields(k, &[("p_hat", &p_hat), ("p", &p)], None)?;
        }
        if k == n {
            break;
        }
        let v = exact_feedback_velocity(&p, &s.target, &s.control, config.sigma).map_err(at)?;
        let a = assemble_fp_operator_with(&v, config.sigma, &s.grid, config.flux).map_err(at)?;
        let a_g = GradientOperator::new(a.clone(), Arc::clone(&integrator), 1.0);
        let q = gradient(&p);
        let (r, r_g) = (noise_cov_density(&p, &kde), noise_cov_gradient(&q, &kde));
        filters.step(config, &p, &q, &a, &a_g, &r, &r_g).map_err(at)?;
        p = step_density(&p, &a, config.dt).map_err(at)?;
        log.velocity_checksums.push(velocity_checksum(&v));
        log.truth_mass.push(p.mass());
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::grid::Rect;

    fn small(mode: &str, extra: &str) -> ExperimentConfig {
        ExperimentConfig::parse(&format!(
            "mode = {mode}\ngrid.nx = 10\ngrid.ny = 10\nagents.n = 200\nkde.h = 0.08\ntime.t_end = 0.5\n\
             filter.riccati_every = 5\n{extra}"
        ))
        .unwrap()
    }

    #[test]
    fn initial_density_weights_partial_cells() {
        let g = Grid::unit_square(30).unwrap();
        let p = initial_density(&g, &Rect::new(0.15, 0.85, 0.15, 0.85).unwrap()).unwrap();
        assert!((p.mass() - 1.0).abs() < 1e-14);
        assert_eq!(p.get(0, 10), 0.0);
        assert!((p.get(10, 10) - 1.0 / 0.49).abs() < 1e-12);
        assert!((p.get(4, 10) - 0.5 / 0.49).abs() < 1e-12);
    }

    #[test]
    fn interconnected_smoke_run() {
        let log = run_experiment(&small("interconnected", "")).unwrap();
        assert_eq!(log.rows.len(), 51);
        assert_eq!(log.velocity_checksums.len(), 50);
        assert!(log.rows.iter().all(|r| r.is_finite() && (r.mass - 1.0).abs() < 1e-9));
        assert!(log.truth_mass.iter().all(|m| (m - 1.0).abs() < 1e-12));
        assert!(log.rows[0].kde_err.is_some());
    }

    #[test]
    fn runs_are_reproducible() {
        let c = small("interconnected", "seed = 5");
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        assert_eq!(a.metrics_csv(), b.metrics_csv());
        let d = run_experiment(&c.with_override("seed", "6").unwrap()).unwrap();
        assert_ne!(a.metrics_csv(), d.metrics_csv());
    }

    #[test]
    fn perfect_feedback_decreases_lyapunov() {
        let log = run_experiment(&small("perfect_feedback", "time.t_end = 2")).unwrap();
        for w in log.rows.windows(2) {
            assert!(w[1].lyapunov <= w[0].lyapunov * (1.0 + 1e-12));
        }
        assert!(log.truth_mass.iter().all(|m| (m - 1.0).abs() < 1e-12));
    }

    #[test]
    fn filter_only_exact_start_stays_exact() {
        let log = run_experiment(&small("filter_only", "filter.init = truth")).unwrap();
        assert!(log.rows.iter().all(|r| r.err_est <= 1e-10 && r.err_grad <= 1e-10));
    }

    #[test]
    fn files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let c = small(
            "interconnected",
            &format!("output.dir = {}\noutput.snapshot_every = 25\noutput.pgm = true\noutput.agents = true", dir.path().display()),
        );
        let log = run_experiment(&c).unwrap();
        let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 52);
        assert!(dir.path().join("p_hat_000025.pgm").exists());
        assert!(dir.path().join("speed_000050.range").exists());
        assert!(dir.path().join("agents_000000.txt").exists());
        assert_eq!(log.snapshots.len(), 3 * 5);
        assert_eq!(fs::read_to_string(dir.path().join("config.echo")).unwrap(), c.echo());
    }

    #[test]
    fn sweep_reports_each_delta() {
        let c = small("iss_sweep", "time.t_end = 1");
        let sweep = iss_sweep(&c, &[0.0, 0.1]).unwrap();
        assert_eq!(sweep.len(), 2);
        assert!(sweep.iter().all(|(_, e)| e.is_finite()));
        assert!(iss_sweep(&c, &[0.1, 0.0]).is_err());
    }

    #[test]
    fn checksum_sees_every_bit() {
        let g = Grid::unit_square(4).unwrap();
        let v = VectorField::from_fn(&g, |x, y| (x, y));
        let mut w = v.clone();
        w.x_mut()[3] = f64::from_bits(w.x()[3].to_bits() ^ 1);
        assert_ne!(velocity_checksum(&v), velocity_checksum(&w));
        assert_eq!(velocity_checksum(&v), velocity_checksum(&v.clone()));
    }
}
