//! Discretized mean-field Kalman filters for the density and its gradient.
//!
//! Each filter carries an estimate, a dense covariance and the gain
//! `L = P R⁻¹`. The estimate follows
//! `x' = A x + b + L (y − x)` with explicit Euler; the covariance follows
//! the Riccati flow `P' = A P + P Aᵀ − P R⁻¹ P + q I`.
//!
//! Two Riccati integrators are available. [`RiccatiScheme::Euler`] is the
//! plain explicit step. [`RiccatiScheme::Split`] advances the linear part
//! with a second-order congruence `M P Mᵀ` in substeps inside the explicit
//! stability limit and then solves `P' = −P R⁻¹ P` exactly over the step,
//! `P ← P − P S (I/dt + S P S)⁻¹ S P` with `S = R^{-1/2}`, which keeps `P`
//! positive semidefinite for any step size and any noise floor.

use faer::linalg::triangular_solve::solve_lower_triangular_in_place;
use faer::{Parallelism, Side};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField, VectorField};
use crate::kde::NoiseModel;
use crate::linalg::sub_gram;
use crate::pde::{GradientOperator, OperatorMatrix, CFL_SAFETY};

/// A linear generator `A` (plus an optional constant forcing `b`).
pub trait LinearGenerator {
    fn dim(&self) -> usize;

    fn apply_linear(&self, x: &[f64]) -> Vec<f64>;

    /// `A X` for a dense `dim × k` matrix.
    fn left_mul(&self, x: &DMatrix<f64>) -> DMatrix<f64>;

    fn drift(&self) -> Option<&[f64]> {
        None
    }

    /// Largest explicit step for the estimate update.
    fn stability_limit(&self) -> f64 {
        f64::INFINITY
    }
}

impl LinearGenerator for OperatorMatrix {
    fn dim(&self) -> usize {
        OperatorMatrix::dim(self)
    }

    fn apply_linear(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply_into(x, &mut out);
        out
    }

    fn left_mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.matrix() * x
    }

    fn stability_limit(&self) -> f64 {
        OperatorMatrix::stability_limit(self, CFL_SAFETY)
    }
}

impl LinearGenerator for GradientOperator {
    fn dim(&self) -> usize {
        GradientOperator::dim(self)
    }

    fn apply_linear(&self, x: &[f64]) -> Vec<f64> {
        GradientOperator::apply_linear(self, x)
    }

    fn left_mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        GradientOperator::left_mul(self, x)
    }

    fn drift(&self) -> Option<&[f64]> {
        Some(GradientOperator::drift(self))
    }

    fn stability_limit(&self) -> f64 {
        self.fp_operator().stability_limit(CFL_SAFETY)
    }
}

impl LinearGenerator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply_linear(&self, x: &[f64]) -> Vec<f64> {
        (self * DVector::from_column_slice(x)).as_slice().to_vec()
    }

    fn left_mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self * x
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RiccatiScheme {
    Euler,
    #[default]
    Split,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterSettings {
    /// Covariance inflation rate `q` in `P' = … + q I`.
    pub q_proc: f64,
    pub scheme: RiccatiScheme,
    /// Covariance and gain are advanced once every this many estimate
    /// steps, over the accumulated interval, and held in between.
    pub riccati_every: usize,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            q_proc: 1e-8,
            scheme: RiccatiScheme::Split,
            riccati_every: 1,
        }
    }
}

impl FilterSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.q_proc >= 0.0 && self.q_proc.is_finite()) {
            return Err(Error::param("q_proc", format!("must be nonnegative, got {}", self.q_proc)));
        }
        if self.riccati_every == 0 {
            return Err(Error::param("riccati_every", "must be at least 1"));
        }
        Ok(())
    }
}

const SYMMETRY_TOL: f64 = 1e-10;

fn check_symmetric(p: &DMatrix<f64>) -> Result<()> {
    let norm = p.norm();
    let asymmetry = (p - p.transpose()).norm();
    if asymmetry > SYMMETRY_TOL * norm {
        return Err(Error::NotSymmetric { asymmetry, norm });
    }
    Ok(())
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

fn check_dims(p: &DMatrix<f64>, a: &impl LinearGenerator, r: &NoiseModel) -> Result<()> {
    let n = a.dim();
    for actual in [p.nrows(), p.ncols(), r.dim()] {
        if actual != n {
            return Err(Error::DimensionMismatch { expected: n, actual });
        }
    }
    Ok(())
}

/// `A P + P Aᵀ + q I`, using that `P Aᵀ = (A P)ᵀ` for symmetric `P`.
fn lyapunov_rate(p: &DMatrix<f64>, a: &impl LinearGenerator, q_proc: f64) -> DMatrix<f64> {
    let ap = a.left_mul(p);
    let mut rate = &ap + ap.transpose();
    for i in 0..rate.nrows() {
        rate[(i, i)] += q_proc;
    }
    rate
}

/// Step of `P' = A P + P Aᵀ + q I` as the congruence `M P Mᵀ + q dt I`
/// with `M = I + dt A + dt² A² / 2`. Second order, and PSD in, PSD out.
pub fn propagate_covariance(p: &DMatrix<f64>, a: &impl LinearGenerator, q_proc: f64, dt: f64) -> DMatrix<f64> {
    let taylor = |x: &DMatrix<f64>| {
        let ax = a.left_mul(x);
        let aax = a.left_mul(&ax);
        x + ax * dt + aax * (0.5 * dt * dt)
    };
    let mp = taylor(p);
    let mut out = taylor(&mp.transpose());
    symmetrize(&mut out);
    for i in 0..out.nrows() {
        out[(i, i)] += q_proc * dt;
    }
    out
}

/// Exact flow of `P' = −P R⁻¹ P` over `dt` for fixed `R`.
pub fn measurement_update(p: &DMatrix<f64>, r: &NoiseModel, dt: f64) -> Result<DMatrix<f64>> {
    let n = p.nrows();
    let s: Vec<f64> = r.precision().iter().map(|d| d.sqrt()).collect();
    // Wᵀ = S P
    let mut z = DMatrix::from_fn(n, n, |i, j| s[i] * p[(i, j)]);
    let mut c = DMatrix::from_fn(n, n, |i, j| z[(i, j)] * s[j]);
    for i in 0..n {
        c[(i, i)] += 1.0 / dt;
    }
    let chol = faer::mat::from_column_major_slice::<f64>(c.as_slice(), n, n)
        .cholesky(Side::Lower)
        .map_err(|_| Error::NotPositiveDefinite("innovation covariance"))?;
    let l = chol.compute_l();
    solve_lower_triangular_in_place(
        l.as_ref(),
        faer::mat::from_column_major_slice_mut::<f64>(z.as_mut_slice(), n, n),
        Parallelism::None,
    );
    let mut out = p.clone();
    sub_gram(out.as_mut_slice(), z.as_slice(), n);
    Ok(out)
}

/// One step of the Riccati flow with the default (split) scheme.
pub fn riccati_step(
    p: &DMatrix<f64>,
    a: &impl LinearGenerator,
    r: &NoiseModel,
    q_proc: f64,
    dt: f64,
) -> Result<DMatrix<f64>> {
    riccati_step_with(RiccatiScheme::Split, p, a, r, q_proc, dt)
}

pub fn riccati_step_with(
    scheme: RiccatiScheme,
    p: &DMatrix<f64>,
    a: &impl LinearGenerator,
    r: &NoiseModel,
    q_proc: f64,
    dt: f64,
) -> Result<DMatrix<f64>> {
    check_dims(p, a, r)?;
    check_symmetric(p)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::param("dt", format!("must be positive, got {dt}")));
    }
    match scheme {
        RiccatiScheme::Euler => {
            let mut rate = lyapunov_rate(p, a, q_proc);
            let mut pd = p.clone();
            for (j, d) in r.precision().iter().enumerate() {
                pd.column_mut(j).scale_mut(*d);
            }
            rate.gemm(-1.0, &pd, p, 1.0);
            let mut out = p + rate * dt;
            symmetrize(&mut out);
            Ok(out)
        }
        RiccatiScheme::Split => {
            let substeps = (dt / a.stability_limit()).ceil().max(1.0) as usize;
            let h = dt / substeps as f64;
            let mut propagated = propagate_covariance(p, a, q_proc, h);
            for _ in 1..substeps {
                propagated = propagate_covariance(&propagated, a, q_proc, h);
            }
            measurement_update(&propagated, r, dt)
        }
    }
}

/// `L = P R⁻¹`.
pub fn kalman_gain(p: &DMatrix<f64>, r: &NoiseModel) -> DMatrix<f64> {
    let mut l = p.clone();
    for (j, d) in r.precision().iter().enumerate() {
        l.column_mut(j).scale_mut(*d);
    }
    l
}

/// Spectral norm of a symmetric matrix.
pub fn symmetric_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().amax()
}

/// Spectral norm of a general matrix.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().max()
}

/// Smallest eigenvalue relative to the spectral norm; `≥ −1e-10` counts as PSD.
pub fn relative_min_eigenvalue(p: &DMatrix<f64>) -> f64 {
    let eig = p.clone().symmetric_eigenvalues();
    let norm = eig.amax();
    if norm == 0.0 {
        0.0
    } else {
        eig.min() / norm
    }
}

#[derive(Clone, Debug)]
pub struct FilterState {
    estimate: Vec<f64>,
    covariance: DMatrix<f64>,
    gain: DMatrix<f64>,
    steps: usize,
}

impl FilterState {
    pub fn new(estimate: Vec<f64>, covariance: DMatrix<f64>, r: &NoiseModel) -> Result<Self> {
        let n = estimate.len();
        for actual in [covariance.nrows(), covariance.ncols(), r.dim()] {
            if actual != n {
                return Err(Error::DimensionMismatch { expected: n, actual });
            }
        }
        check_symmetric(&covariance)?;
        let gain = kalman_gain(&covariance, r);
        Ok(Self {
            estimate,
            covariance,
            gain,
            steps: 0,
        })
    }

    /// Starts from a prior measurement with `P₀ = R₀`.
    pub fn from_prior(estimate: Vec<f64>, r0: &NoiseModel) -> Result<Self> {
        Self::new(estimate, r0.to_dense(), r0)
    }

    pub fn estimate(&self) -> &[f64] {
        &self.estimate
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn advance(
        &mut self,
        y: &[f64],
        a: &impl LinearGenerator,
        r: &NoiseModel,
        dt: f64,
        settings: &FilterSettings,
    ) -> Result<()> {
        let n = self.estimate.len();
        for actual in [y.len(), a.dim(), r.dim()] {
            if actual != n {
                return Err(Error::DimensionMismatch { expected: n, actual });
            }
        }
        let limit = a.stability_limit();
        if !(dt > 0.0) || dt > limit {
            return Err(Error::UnstableTimeStep { dt, limit });
        }
        if self.steps % settings.riccati_every == 0 {
            let span = dt * settings.riccati_every as f64;
            self.covariance = riccati_step_with(settings.scheme, &self.covariance, a, r, settings.q_proc, span)?;
            self.gain = kalman_gain(&self.covariance, r);
        }

        let innovation = DVector::from_iterator(n, y.iter().zip(&self.estimate).map(|(y, x)| y - x));
        let correction = &self.gain * innovation;
        let mut rate = a.apply_linear(&self.estimate);
        if let Some(b) = a.drift() {
            for (r, b) in rate.iter_mut().zip(b) {
                *r += b;
            }
        }
        for ((x, r), c) in self.estimate.iter_mut().zip(&rate).zip(correction.iter()) {
            *x += dt * (r + c);
        }
        if self.estimate.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("filter estimate"));
        }
        self.steps += 1;
        Ok(())
    }
}

/// Density filter step; the estimate is renormalized to unit mass.
pub fn density_filter_step(
    state: &mut FilterState,
    y: &ScalarField,
    a: &OperatorMatrix,
    r: &NoiseModel,
    dt: f64,
    settings: &FilterSettings,
) -> Result<()> {
    y.check_same_grid(a.grid())?;
    state.advance(y.values(), a, r, dt, settings)?;
    let mass: f64 = state.estimate.iter().sum::<f64>() * a.grid().cell_area();
    if !(mass > 0.0) {
        return Err(Error::NonFinite("density estimate mass"));
    }
    for x in &mut state.estimate {
        *x /= mass;
    }
    Ok(())
}

/// Gradient filter step on the stacked `2M` state, including the affine
/// drift of the mass-pinned gradient dynamics.
pub fn gradient_filter_step(
    state: &mut FilterState,
    y_g: &VectorField,
    a_g: &GradientOperator,
    r_g: &NoiseModel,
    dt: f64,
    settings: &FilterSettings,
) -> Result<()> {
    if y_g.grid() != a_g.grid() {
        return Err(Error::DimensionMismatch {
            expected: a_g.grid().len(),
            actual: y_g.grid().len(),
        });
    }
    state.advance(&y_g.to_stacked(), a_g, r_g, dt, settings)
}

pub fn estimate_density(state: &FilterState, grid: &Grid) -> Result<ScalarField> {
    ScalarField::from_values(grid, state.estimate.clone())
}

pub fn estimate_gradient(state: &FilterState, grid: &Grid) -> Result<VectorField> {
    VectorField::from_stacked(grid, &state.estimate)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GainGap {
    pub t: f64,
    pub covariance: f64,
    pub gain: f64,
}

/// Runs the Riccati flow under an approximate and a true noise model from the
/// same `P₀` and reports `‖P̄ − P‖` and `‖L̄ − L‖` after every step.
pub fn gain_gap(
    r_approx: &NoiseModel,
    r_true: &NoiseModel,
    a: &impl LinearGenerator,
    p0: &DMatrix<f64>,
    q_proc: f64,
    horizon: f64,
    dt: f64,
) -> Result<Vec<GainGap>> {
    let steps = (horizon / dt).round() as usize;
    let (mut p, mut p_bar) = (p0.clone(), p0.clone());
    let mut out = Vec::with_capacity(steps);
    for k in 1..=steps {
        p = riccati_step(&p, a, r_approx, q_proc, dt)?;
        p_bar = riccati_step(&p_bar, a, r_true, q_proc, dt)?;
        let dl = kalman_gain(&p_bar, r_true) - kalman_gain(&p, r_approx);
        out.push(GainGap {
            t: k as f64 * dt,
            covariance: symmetric_norm(&(&p_bar - &p)),
            gain: operator_norm(&dl),
        });
    }
    Ok(out)
}
