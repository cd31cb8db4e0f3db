use nalgebra::DMatrix;
use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField, VectorField};

/// Default safety factor applied to the explicit-Euler stability bound.
pub const CFL_SAFETY: f64 = 0.9;

/// Discrete generator `p ↦ −∇·(v p) + Δ(σ p)` with zero boundary flux.
///
/// Stored sparse (five-point pattern); [`OperatorMatrix::to_dense`] gives
/// the dense form. Every column sums to zero, so `Σ (A p)` vanishes for
/// any `p`.
#[derive(Clone, Debug)]
pub struct OperatorMatrix {
    grid: Grid,
    matrix: CsrMatrix<f64>,
    sigma: f64,
    max_speed: f64,
}

impl OperatorMatrix {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.len()
    }

    pub fn matrix(&self) -> &CsrMatrix<f64> {
        &self.matrix
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Largest velocity magnitude the operator was assembled from.
    pub fn max_speed(&self) -> f64 {
        self.max_speed
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut dense = DMatrix::zeros(self.dim(), self.dim());
        for (r, c, &v) in self.matrix.triplet_iter() {
            dense[(r, c)] += v;
        }
        dense
    }

    pub fn apply(&self, p: &ScalarField) -> ScalarField {
        let mut out = vec![0.0; self.dim()];
        self.apply_into(p.values(), &mut out);
        ScalarField::from_values(&self.grid, out).expect("operator and field share a grid")
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (row, o) in self.matrix.row_iter().zip(out.iter_mut()) {
            *o = row
                .col_indices()
                .iter()
                .zip(row.values())
                .map(|(&c, &v)| v * x[c])
                .sum();
        }
    }

    /// Largest explicit-Euler step allowed for this operator:
    /// `safety · h² / (4σ + max|v| · h)` with `h = min(dx, dy)`.
    pub fn stability_limit(&self, safety: f64) -> f64 {
        let h = self.grid.min_spacing();
        let denom = 4.0 * self.sigma + self.max_speed * h;
        if denom > 0.0 {
            safety * h * h / denom
        } else {
            f64::INFINITY
        }
    }

    /// Largest absolute column sum; zero up to rounding by construction.
    pub fn max_column_sum(&self) -> f64 {
        let mut sums = vec![0.0; self.dim()];
        for (_, c, &v) in self.matrix.triplet_iter() {
            sums[c] += v;
        }
        sums.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// Advective face flux.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Flux {
    /// `½(v_a p_a + v_b p_b)`, second order.
    #[default]
    Centered,
    /// Face velocity `u = ½(v_a + v_b)` times the upstream cell value. First
    /// order, but every off-diagonal entry is nonnegative.
    Upwind,
}

impl std::str::FromStr for Flux {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centered" => Ok(Flux::Centered),
            "upwind" => Ok(Flux::Upwind),
            other => Err(Error::Config(format!("unknown flux `{other}`"))),
        }
    }
}

impl Flux {
    pub fn as_str(&self) -> &'static str {
        match self {
            Flux::Centered => "centered",
            Flux::Upwind => "upwind",
        }
    }
}

/// Assembles the Fokker–Planck generator in flux form with centered
/// advective fluxes.
///
/// On each interior face the flux is `½(v_a p_a + v_b p_b) − σ (p_b − p_a)/h`;
/// boundary faces carry no flux. Diagonal entries are set to minus the
/// off-diagonal column sum, which makes column sums vanish exactly.
pub fn assemble_fp_operator(v: &VectorField, sigma: f64, grid: &Grid) -> Result<OperatorMatrix> {
    assemble_fp_operator_with(v, sigma, grid, Flux::Centered)
}

pub fn assemble_fp_operator_with(v: &VectorField, sigma: f64, grid: &Grid, flux: Flux) -> Result<OperatorMatrix> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::param("sigma", format!("must be finite and nonnegative, got {sigma}")));
    }
    if v.grid().len() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            actual: v.grid().len(),
        });
    }
    if !v.is_finite() {
        return Err(Error::NonFinite("velocity field"));
    }

    let m = grid.len();
    let (dx, dy) = (grid.dx(), grid.dy());
    let mut coo = CooMatrix::new(m, m);
    let mut col_sums = vec![0.0; m];
    let mut face = |a: usize, b: usize, va: f64, vb: f64, h: f64| {
        // F = ca p_a + cb p_b; d p_a/dt −= F/h, d p_b/dt += F/h
        let (ca, cb) = match flux {
            Flux::Centered => (0.5 * va, 0.5 * vb),
            Flux::Upwind => {
                let u = 0.5 * (va + vb);
                (u.max(0.0), u.min(0.0))
            }
        };
        let (ca, cb) = (ca + sigma / h, cb - sigma / h);
        let (ab, ba) = (-cb / h, ca / h);
        coo.push(a, b, ab);
        coo.push(b, a, ba);
        col_sums[b] += ab;
        col_sums[a] += ba;
    };
    for j in 0..grid.ny() {
        for i in 1..grid.nx() {
            let (a, b) = (grid.index(i - 1, j), grid.index(i, j));
            face(a, b, v.x()[a], v.x()[b], dx);
        }
    }
    for j in 1..grid.ny() {
        for i in 0..grid.nx() {
            let (a, b) = (grid.index(i, j - 1), grid.index(i, j));
            face(a, b, v.y()[a], v.y()[b], dy);
        }
    }
    for (c, s) in col_sums.iter().enumerate() {
        coo.push(c, c, -s);
    }

    Ok(OperatorMatrix {
        grid: *grid,
        matrix: CsrMatrix::from(&coo),
        sigma,
        max_speed: v.max_magnitude(),
    })
}

/// One explicit Euler step `p + dt · A p`, refused above the stability bound.
pub fn step_density(p: &ScalarField, a: &OperatorMatrix, dt: f64) -> Result<ScalarField> {
    step_density_with_safety(p, a, dt, CFL_SAFETY)
}

pub fn step_density_with_safety(
    p: &ScalarField,
    a: &OperatorMatrix,
    dt: f64,
    safety: f64,
) -> Result<ScalarField> {
    p.check_same_grid(a.grid())?;
    let limit = a.stability_limit(safety);
    if !(dt > 0.0) || dt > limit {
        return Err(Error::UnstableTimeStep { dt, limit });
    }
    let mut rate = vec![0.0; a.dim()];
    a.apply_into(p.values(), &mut rate);
    let values = p.values().iter().zip(&rate).map(|(&x, &r)| x + dt * r).collect();
    ScalarField::from_values(a.grid(), values)
}

/// `‖A p‖_{L²}`: zero exactly when `p` is stationary under `A`.
pub fn steady_state_residual(p: &ScalarField, a: &OperatorMatrix) -> f64 {
    let r = a.apply(p);
    (r.values().iter().map(|v| v * v).sum::<f64>() * p.grid().cell_area()).sqrt()
}

/// Piecewise-constant diffusion coefficient σ(t).
#[derive(Clone, Debug, PartialEq)]
pub enum DiffusionSchedule {
    Constant(f64),
    /// `(t_start, σ)` pairs sorted by start time; the first applies from t = 0.
    Steps(Vec<(f64, f64)>),
}

impl DiffusionSchedule {
    /// σ from the per-axis noise standard deviation `√(2σ)`.
    pub fn from_noise_std(std: f64) -> Result<Self> {
        if !(std >= 0.0 && std.is_finite()) {
            return Err(Error::param("noise_std", "must be finite and nonnegative"));
        }
        Ok(Self::Constant(0.5 * std * std))
    }

    pub fn steps(mut steps: Vec<(f64, f64)>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::param("sigma schedule", "needs at least one step"));
        }
        if steps.iter().any(|&(t, s)| !(t.is_finite() && s.is_finite() && s >= 0.0)) {
            return Err(Error::param("sigma schedule", "entries must be finite with σ ≥ 0"));
        }
        steps.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self::Steps(steps))
    }

    pub fn at(&self, t: f64) -> f64 {
        match self {
            Self::Constant(s) => *s,
            Self::Steps(steps) => steps
                .iter()
                .take_while(|(start, _)| *start <= t)
                .last()
                .unwrap_or(&steps[0])
                .1,
        }
    }

    pub fn min(&self) -> f64 {
        match self {
            Self::Constant(s) => *s,
            Self::Steps(steps) => steps.iter().map(|s| s.1).fold(f64::INFINITY, f64::min),
        }
    }

    pub fn max(&self) -> f64 {
        match self {
            Self::Constant(s) => *s,
            Self::Steps(steps) => steps.iter().map(|s| s.1).fold(0.0, f64::max),
        }
    }
}
