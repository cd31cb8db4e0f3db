//! Norms, the Lyapunov functional, decay-rate fits and the metrics table.

use std::fmt::Write as _;

use crate::control::TargetDensity;
use crate::error::{Error, Result};
use crate::grid::{ScalarField, VectorField};

/// `‖f‖_{L²}` with cell-area quadrature.
pub fn l2(f: &ScalarField) -> f64 {
    (f.values().iter().map(|v| v * v).sum::<f64>() * f.grid().cell_area()).sqrt()
}

/// `‖F‖_{L²}` of a vector field, summing both components.
pub fn l2_vector(f: &VectorField) -> f64 {
    let s: f64 = f.x().iter().chain(f.y()).map(|v| v * v).sum();
    (s * f.grid().cell_area()).sqrt()
}

/// `(Σ f² w dx dy)^{1/2}` for a strictly positive weight.
pub fn weighted_l2(f: &ScalarField, weight: &ScalarField) -> Result<f64> {
    f.check_same_grid(weight.grid())?;
    if weight.values().iter().any(|w| !(*w > 0.0)) {
        return Err(Error::param("weight", "must be strictly positive"));
    }
    let s: f64 = f.values().iter().zip(weight.values()).map(|(f, w)| f * f * w).sum();
    Ok((s * f.grid().cell_area()).sqrt())
}

/// `V = ½ ‖p − p_*‖²_{L²(1/p_*)}`.
pub fn lyapunov_v(p: &ScalarField, target: &TargetDensity) -> Result<f64> {
    p.check_same_grid(target.grid())?;
    let s: f64 = p
        .values()
        .iter()
        .zip(target.p_star().values())
        .map(|(p, ps)| (p - ps).powi(2) / ps)
        .sum();
    Ok(0.5 * s * p.grid().cell_area())
}

/// Least-squares slope of `ln(value)` against `t` over the points whose index
/// lies in `[from, to)` as fractions of the series length; returns `−slope`.
pub fn fit_decay_rate_between(series: &[(f64, f64)], from: f64, to: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&from) || !(from < to && to <= 1.0) {
        return Err(Error::param("window", format!("bad fraction range [{from}, {to})")));
    }
    let n = series.len();
    let lo = (from * n as f64).floor() as usize;
    let hi = ((to * n as f64).ceil() as usize).min(n);
    let window = &series[lo..hi];
    if window.len() < 10 {
        return Err(Error::param("window", format!("needs at least 10 points, has {}", window.len())));
    }
    if let Some((t, v)) = window.iter().find(|(_, v)| !(*v > 0.0)) {
        return Err(Error::param("series", format!("nonpositive value {v} at t = {t}")));
    }
    let m = window.len() as f64;
    let mean_t = window.iter().map(|(t, _)| t).sum::<f64>() / m;
    let mean_l = window.iter().map(|(_, v)| v.ln()).sum::<f64>() / m;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, v) in window {
        let dt = t - mean_t;
        sxy += dt * (v.ln() - mean_l);
        sxx += dt * dt;
    }
    Ok(-sxy / sxx)
}

/// Decay rate over the trailing `window` fraction of the series.
pub fn fit_decay_rate(series: &[(f64, f64)], window: f64) -> Result<f64> {
    fit_decay_rate_between(series, 1.0 - window, 1.0)
}

/// Mean of the trailing `window` fraction of `values`.
pub fn trailing_mean(values: &[f64], window: f64) -> f64 {
    let n = values.len();
    let k = ((window * n as f64).ceil() as usize).clamp(1, n.max(1));
    values[n - k..].iter().sum::<f64>() / k as f64
}

pub const METRICS_HEADER: &str = "step,t,err_track,err_est,err_grad,lyapunov,mass,kde_err";

/// One row of the per-step metrics table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub t: f64,
    pub err_track: f64,
    pub err_est: f64,
    pub err_grad: f64,
    pub lyapunov: f64,
    pub mass: f64,
    /// Only available when a truth density is tracked.
    pub kde_err: Option<f64>,
}

impl MetricRow {
    pub fn is_finite(&self) -> bool {
        [self.t, self.err_track, self.err_est, self.err_grad, self.lyapunov, self.mass]
            .iter()
            .all(|v| v.is_finite())
            && self.kde_err.is_none_or(f64::is_finite)
    }

    pub fn csv_line(&self) -> String {
        let kde = self.kde_err.map_or_else(|| "nan".to_string(), |v| format!("{v:.12e}"));
        format!(
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{}",
            self.step, self.t, self.err_track, self.err_est, self.err_grad, self.lyapunov, self.mass, kde
        )
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::with_capacity(120 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}
