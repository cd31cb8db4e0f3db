//! Target densities and the density feedback laws.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{gradient, Grid, ScalarField, VectorField};

/// One bivariate normal component with covariance `[[sxx, sxy], [sxy, syy]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianComponent {
    pub mean: [f64; 2],
    pub cov: [f64; 3],
    pub weight: f64,
}

impl GaussianComponent {
    fn eval(&self, x: f64, y: f64) -> f64 {
        let [sxx, sxy, syy] = self.cov;
        let det = sxx * syy - sxy * sxy;
        let (dx, dy) = (x - self.mean[0], y - self.mean[1]);
        let quad = (syy * dx * dx - 2.0 * sxy * dx * dy + sxx * dy * dy) / det;
        self.weight * (-0.5 * quad).exp() / (2.0 * PI * det.sqrt())
    }

    fn validate(&self) -> Result<()> {
        let [sxx, sxy, syy] = self.cov;
        if !(sxx > 0.0 && syy > 0.0 && sxx * syy - sxy * sxy > 0.0) {
            return Err(Error::param("target covariance", format!("{:?} is not positive definite", self.cov)));
        }
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return Err(Error::param("target weight", format!("must be positive, got {}", self.weight)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TargetSpec {
    Uniform,
    GaussianMixture(Vec<GaussianComponent>),
    Ring { center: [f64; 2], radius: f64, width: f64 },
}

impl TargetSpec {
    fn shape(&self, x: f64, y: f64) -> f64 {
        match self {
            TargetSpec::Uniform => 1.0,
            TargetSpec::GaussianMixture(parts) => parts.iter().map(|c| c.eval(x, y)).sum(),
            TargetSpec::Ring { center, radius, width } => {
                let r = (x - center[0]).hypot(y - center[1]);
                (-0.5 * ((r - radius) / width).powi(2)).exp()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            TargetSpec::Uniform => Ok(()),
            TargetSpec::GaussianMixture(parts) => {
                if parts.is_empty() {
                    return Err(Error::param("target", "mixture needs at least one component"));
                }
                parts.iter().try_for_each(GaussianComponent::validate)
            }
            TargetSpec::Ring { radius, width, .. } => {
                if !(*radius >= 0.0 && *width > 0.0) {
                    return Err(Error::param("target", "ring needs radius ≥ 0 and width > 0"));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetDensity {
    p_star: ScalarField,
    grad_p_star: VectorField,
    p_min: f64,
}

impl TargetDensity {
    /// Wraps a given positive unit-mass field.
    pub fn from_field(p_star: ScalarField) -> Result<Self> {
        let p_min = p_star.min();
        if !(p_min > 0.0) || !p_star.is_finite() {
            return Err(Error::param("target", "density must be finite and strictly positive"));
        }
        if (p_star.mass() - 1.0).abs() > 1e-12 {
            return Err(Error::param("target", format!("mass is {}, expected 1", p_star.mass())));
        }
        Ok(Self {
            grad_p_star: gradient(&p_star),
            p_star,
            p_min,
        })
    }

    pub fn p_star(&self) -> &ScalarField {
        &self.p_star
    }

    pub fn grad_p_star(&self) -> &VectorField {
        &self.grad_p_star
    }

    pub fn p_min(&self) -> f64 {
        self.p_min
    }

    pub fn grid(&self) -> &Grid {
        self.p_star.grid()
    }

    /// `σ ∇p_* / p_*`, the velocity that holds `p_*` stationary.
    pub fn equilibrium_velocity(&self, sigma: f64) -> VectorField {
        let p = self.p_star.values();
        let gx = self.grad_p_star.x().iter().zip(p).map(|(g, p)| sigma * g / p).collect();
        let gy = self.grad_p_star.y().iter().zip(p).map(|(g, p)| sigma * g / p).collect();
        VectorField::from_components(self.grid(), gx, gy).expect("same grid")
    }
}

/// Evaluates `spec` at the cell centers, normalizes it and mixes in the floor:
/// `p_* = p_min + (1 − p_min |Ω|) · ŝ` with `ŝ` the unit-mass shape. The result
/// has unit mass and never drops below `p_min`.
pub fn make_target(spec: &TargetSpec, grid: &Grid, p_min: f64) -> Result<TargetDensity> {
    spec.validate()?;
    let area = grid.domain().area();
    if !(p_min > 0.0 && p_min * area < 1.0) {
        return Err(Error::param("p_min", format!("need 0 < p_min < 1/|Ω|, got {p_min}")));
    }
    let shape = ScalarField::from_fn(grid, |x, y| spec.shape(x, y));
    let mass = shape.mass();
    if !shape.is_finite() || !(mass > 0.0 && mass.is_finite()) {
        return Err(Error::NonFinite("target spec"));
    }
    let scale = (1.0 - p_min * area) / mass;
    let mut p = shape.map(|s| p_min + scale * s);
    // absorb the rounding left in the mass so it is 1 to the last bits
    let m = p.mass();
    p = p.map(|v| v / m);
    Ok(TargetDensity {
        grad_p_star: gradient(&p),
        p_min: p.min().min(p_min),
        p_star: p,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlConfig {
    pub alpha: f64,
    pub v_max: Option<f64>,
}

impl ControlConfig {
    pub fn new(alpha: f64, v_max: Option<f64>) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::param("alpha", format!("must be nonnegative, got {alpha}")));
        }
        if let Some(cap) = v_max {
            if !(cap > 0.0) {
                return Err(Error::param("v_max", format!("must be positive, got {cap}")));
            }
        }
        Ok(Self { alpha, v_max })
    }

    fn clip(&self, mut v: VectorField) -> VectorField {
        if let Some(cap) = self.v_max {
            let (xs, ys) = (v.x().to_vec(), v.y().to_vec());
            for (k, (x, y)) in xs.iter().zip(&ys).enumerate() {
                let m = x.hypot(*y);
                if m > cap {
                    v.x_mut()[k] = x * cap / m;
                    v.y_mut()[k] = y * cap / m;
                }
            }
        }
        v
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::param("sigma", format!("must be nonnegative, got {sigma}")));
    }
    Ok(())
}

/// Feedback term of the estimate law, `−α (p_* q̂ − p̂ ∇p_*) / p_*²`.
pub fn feedback_drive(
    p_hat: &ScalarField,
    q_hat: &VectorField,
    target: &TargetDensity,
    alpha: f64,
) -> Result<VectorField> {
    p_hat.check_same_grid(target.grid())?;
    if q_hat.grid() != target.grid() {
        return Err(Error::DimensionMismatch {
            expected: target.grid().len(),
            actual: q_hat.grid().len(),
        });
    }
    if !p_hat.is_finite() || !q_hat.is_finite() {
        return Err(Error::NonFinite("density estimates"));
    }
    let ps = target.p_star.values();
    let ph = p_hat.values();
    let component = |q: &[f64], g: &[f64]| -> Vec<f64> {
        (0..ps.len())
            .map(|k| -alpha * ((ps[k] * q[k] - ph[k] * g[k]) / (ps[k] * ps[k])))
            .collect()
    };
    let vx = component(q_hat.x(), target.grad_p_star.x());
    let vy = component(q_hat.y(), target.grad_p_star.y());
    VectorField::from_components(target.grid(), vx, vy)
}

/// Feedback law from estimates:
/// `v = −α (p_* q̂ − p̂ ∇p_*) / p_*² + σ ∇p_* / p_*`.
pub fn feedback_velocity(
    p_hat: &ScalarField,
    q_hat: &VectorField,
    target: &TargetDensity,
    control: &ControlConfig,
    sigma: f64,
) -> Result<VectorField> {
    check_sigma(sigma)?;
    let drive = feedback_drive(p_hat, q_hat, target, control.alpha)?;
    Ok(control.clip(&drive + &target.equilibrium_velocity(sigma)))
}

/// Feedback law with the true density: `v = −α ∇(p / p_*) + σ ∇p_* / p_*`.
pub fn exact_feedback_velocity(
    p: &ScalarField,
    target: &TargetDensity,
    control: &ControlConfig,
    sigma: f64,
) -> Result<VectorField> {
    check_sigma(sigma)?;
    p.check_same_grid(target.grid())?;
    if !p.is_finite() {
        return Err(Error::NonFinite("density"));
    }
    let ratio = p.zip_map(&target.p_star, |p, s| p / s);
    let drive = &gradient(&ratio) * (-control.alpha);
    Ok(control.clip(&drive + &target.equilibrium_velocity(sigma)))
}
