//! Gaussian kernel density estimates of agent positions and the diagonal
//! noise models that feed the filters.
//!
//! The 2-D Gaussian kernel is separable, so the estimate at every cell
//! center reduces to products of per-agent 1-D kernel tables:
//! `p[j, i] = Σ_a gy[a, j] · gx[a, i]`.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField, VectorField};
use crate::linalg::mul_tn;

/// `‖K‖₂²` for the standard 2-D Gaussian kernel.
pub const KERNEL_L2_SQ: f64 = 1.0 / (4.0 * PI);
/// `‖∇K‖₂²` for the standard 2-D Gaussian kernel.
pub const KERNEL_GRAD_L2_SQ: f64 = 1.0 / (4.0 * PI);

pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdeConfig {
    pub bandwidth: f64,
    /// Density covariance scale `‖K‖²/(N h²)`.
    pub k: f64,
    /// Gradient covariance scale `‖∇K‖²/(N h⁴)`.
    pub k_g: f64,
    pub floor_eps: f64,
}

impl KdeConfig {
    pub fn new(bandwidth: f64, n_agents: usize, floor_eps: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::param("bandwidth", format!("must be positive, got {bandwidth}")));
        }
        if !(floor_eps > 0.0 && floor_eps.is_finite()) {
            return Err(Error::param("floor_eps", format!("must be positive, got {floor_eps}")));
        }
        if n_agents == 0 {
            return Err(Error::param("n_agents", "need at least one agent"));
        }
        let n = n_agents as f64;
        let h2 = bandwidth * bandwidth;
        Ok(Self {
            bandwidth,
            k: KERNEL_L2_SQ / (n * h2),
            k_g: KERNEL_GRAD_L2_SQ / (n * h2 * h2),
            floor_eps,
        })
    }
}

/// Diagonal covariance `R = diag(values)`, each entry at least the floor.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    diag: Vec<f64>,
}

impl NoiseModel {
    pub fn new(diag: Vec<f64>, floor_eps: f64) -> Result<Self> {
        if let Some(bad) = diag.iter().find(|d| !(**d >= floor_eps) || !d.is_finite()) {
            return Err(Error::param("noise diagonal", format!("entry {bad} below floor {floor_eps}")));
        }
        Ok(Self { diag })
    }

    pub fn constant(dim: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; dim], value)
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// Entries of `R⁻¹`.
    pub fn precision(&self) -> Vec<f64> {
        self.diag.iter().map(|d| 1.0 / d).collect()
    }

    /// Range `[min, max]` of `R⁻¹`, the two-sided bound the filter theory needs.
    pub fn precision_bounds(&self) -> (f64, f64) {
        let r_max = self.diag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let r_min = self.diag.iter().copied().fold(f64::INFINITY, f64::min);
        (1.0 / r_max, 1.0 / r_min)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.diag))
    }
}

fn check_inputs(positions: &[[f64; 2]], h: f64) -> Result<()> {
    if positions.is_empty() {
        return Err(Error::param("positions", "need at least one sample"));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::param("bandwidth", format!("must be positive, got {h}")));
    }
    Ok(())
}

/// Per-agent kernel tables along one axis, `N × n`, with the optional
/// derivative table `−(c − X)/h² · g`.
fn axis_tables(coords: impl Iterator<Item = f64>, centers: &[f64], h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let coords: Vec<f64> = coords.collect();
    let inv = 1.0 / h;
    let g = DMatrix::from_fn(coords.len(), centers.len(), |a, i| {
        let u = (centers[i] - coords[a]) * inv;
        (-0.5 * u * u).exp()
    });
    let dg = DMatrix::from_fn(coords.len(), centers.len(), |a, i| {
        -(centers[i] - coords[a]) * inv * inv * g[(a, i)]
    });
    (g, dg)
}

struct Tables {
    gx: DMatrix<f64>,
    dgx: DMatrix<f64>,
    gy: DMatrix<f64>,
    dgy: DMatrix<f64>,
    scale: f64,
}

fn tables(positions: &[[f64; 2]], h: f64, grid: &Grid) -> Tables {
    let xs: Vec<f64> = (0..grid.nx()).map(|i| grid.x_center(i)).collect();
    let ys: Vec<f64> = (0..grid.ny()).map(|j| grid.y_center(j)).collect();
    let (gx, dgx) = axis_tables(positions.iter().map(|p| p[0]), &xs, h);
    let (gy, dgy) = axis_tables(positions.iter().map(|p| p[1]), &ys, h);
    Tables {
        gx,
        dgx,
        gy,
        dgy,
        scale: 1.0 / (2.0 * PI * positions.len() as f64 * h * h),
    }
}

/// `Σ_a ty[a, j] · tx[a, i]` laid out x-fastest.
fn contract(tx: &DMatrix<f64>, ty: &DMatrix<f64>, scale: f64) -> Vec<f64> {
    // (nx × N)(N × ny) is column-major nx × ny, i.e. index j·nx + i
    let mut out = DMatrix::<f64>::zeros(tx.ncols(), ty.ncols());
    mul_tn(out.as_mut_slice(), tx.as_slice(), ty.as_slice(), tx.nrows(), scale);
    out.as_slice().to_vec()
}

/// Gaussian KDE `1/(N h²) Σ K((x − X_a)/h)` at the cell centers.
pub fn kde_density(positions: &[[f64; 2]], h: f64, grid: &Grid) -> Result<ScalarField> {
    check_inputs(positions, h)?;
    let t = tables(positions, h, grid);
    ScalarField::from_values(grid, contract(&t.gx, &t.gy, t.scale))
}

/// Analytic gradient of the Gaussian KDE at the cell centers.
pub fn kde_gradient(positions: &[[f64; 2]], h: f64, grid: &Grid) -> Result<VectorField> {
    check_inputs(positions, h)?;
    let t = tables(positions, h, grid);
    VectorField::from_components(
        grid,
        contract(&t.dgx, &t.gy, t.scale),
        contract(&t.gx, &t.dgy, t.scale),
    )
}

/// Density and gradient from one set of kernel tables.
pub fn kde_measurements(positions: &[[f64; 2]], h: f64, grid: &Grid) -> Result<(ScalarField, VectorField)> {
    check_inputs(positions, h)?;
    let t = tables(positions, h, grid);
    let p = ScalarField::from_values(grid, contract(&t.gx, &t.gy, t.scale))?;
    let q = VectorField::from_components(
        grid,
        contract(&t.dgx, &t.gy, t.scale),
        contract(&t.gx, &t.dgy, t.scale),
    )?;
    Ok((p, q))
}

/// `R = max(k · p_KDE, floor)` cellwise.
pub fn noise_cov_density(p_kde: &ScalarField, cfg: &KdeConfig) -> NoiseModel {
    let diag = p_kde.values().iter().map(|p| (cfg.k * p).max(cfg.floor_eps)).collect();
    NoiseModel { diag }
}

/// `R_g = max(k_g · |q|, floor)` per stacked component.
pub fn noise_cov_gradient(grad_kde: &VectorField, cfg: &KdeConfig) -> NoiseModel {
    let diag = grad_kde
        .to_stacked()
        .iter()
        .map(|q| (cfg.k_g * q.abs()).max(cfg.floor_eps))
        .collect();
    NoiseModel { diag }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::grid::{gradient, Rect};

    fn uniform_samples(n: usize, seed: u64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect()
    }

    #[test]
    fn single_sample_peak_value() {
        let g = Grid::unit_square(30).unwrap();
        let c = [g.x_center(12), g.y_center(7)];
        let p = kde_density(&[c], 0.04, &g).unwrap();
        let expected = 1.0 / (2.0 * PI * 0.04 * 0.04);
        assert!((p.get(12, 7) - expected).abs() < 1e-10);
        assert!((expected - 99.47).abs() < 0.01);
        let q = kde_gradient(&[c], 0.04, &g).unwrap();
        let idx = g.index(12, 7);
        assert!(q.at(idx)[0].abs() < 1e-12 && q.at(idx)[1].abs() < 1e-12);
    }

    #[test]
    fn matches_direct_summation() {
        let g = Grid::new(7, 5, Rect::new(0.0, 1.0, 0.0, 0.6).unwrap()).unwrap();
        let pts = uniform_samples(13, 4);
        let pts: Vec<[f64; 2]> = pts.iter().map(|p| [p[0], 0.6 * p[1]]).collect();
        let h = 0.11;
        let p = kde_density(&pts, h, &g).unwrap();
        let q = kde_gradient(&pts, h, &g).unwrap();
        for (idx, (x, y)) in g.centers().enumerate() {
            let mut d = 0.0;
            let mut gx = 0.0;
            let mut gy = 0.0;
            for s in &pts {
                let (ux, uy) = ((x - s[0]) / h, (y - s[1]) / h);
                let k = (-(ux * ux + uy * uy) / 2.0).exp() / (2.0 * PI);
                d += k;
                gx += -ux / h * k;
                gy += -uy / h * k;
            }
            let norm = pts.len() as f64 * h * h;
            assert!((p.values()[idx] - d / norm).abs() < 1e-12);
            assert!((q.at(idx)[0] - gx / norm).abs() < 1e-10);
            assert!((q.at(idx)[1] - gy / norm).abs() < 1e-10);
        }
    }

    #[test]
    fn nonnegative_and_mass_near_one() {
        let g = Grid::unit_square(30).unwrap();
        let pts = uniform_samples(1024, 11);
        let p = kde_density(&pts, 0.04, &g).unwrap();
        assert!(p.min() >= 0.0);
        let m = p.mass();
        assert!((0.9..=1.0).contains(&m), "mass {m}");
    }

    #[test]
    fn permutation_invariant() {
        let g = Grid::unit_square(12).unwrap();
        let pts = uniform_samples(50, 2);
        let mut rev = pts.clone();
        rev.reverse();
        let a = kde_density(&pts, 0.07, &g).unwrap();
        let b = kde_density(&rev, 0.07, &g).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mirror_pair_gives_antisymmetric_x_gradient() {
        let g = Grid::unit_square(10).unwrap();
        let pts = [[0.3, 0.42], [0.7, 0.42]];
        let q = kde_gradient(&pts, 0.1, &g).unwrap();
        for j in 0..10 {
            for i in 0..10 {
                let a = q.x()[g.index(i, j)];
                let b = q.x()[g.index(9 - i, j)];
                assert!((a + b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn analytic_gradient_agrees_with_finite_differences_under_refinement() {
        let pts = uniform_samples(20, 8);
        let err = |n: usize| {
            let g = Grid::unit_square(n).unwrap();
            let fd = gradient(&kde_density(&pts, 0.15, &g).unwrap());
            let an = kde_gradient(&pts, 0.15, &g).unwrap();
            (&fd - &an).max_magnitude()
        };
        let (coarse, fine) = (err(40), err(80));
        assert!(coarse / fine > 3.5, "ratio {}", coarse / fine);
    }

    #[test]
    fn kernel_constants_match_quadrature() {
        // midpoint rule on [-8, 8]² for ‖K‖² and ‖∇K‖²
        let n = 800;
        let step = 16.0 / n as f64;
        let (mut k2, mut g2) = (0.0, 0.0);
        for a in 0..n {
            for b in 0..n {
                let (x, y) = (-8.0 + (a as f64 + 0.5) * step, -8.0 + (b as f64 + 0.5) * step);
                let k = (-(x * x + y * y) / 2.0).exp() / (2.0 * PI);
                k2 += k * k;
                g2 += (x * x + y * y) * k * k;
            }
        }
        let w = step * step;
        assert!((k2 * w - KERNEL_L2_SQ).abs() < 1e-10);
        assert!((g2 * w - KERNEL_GRAD_L2_SQ).abs() < 1e-10);

        let cfg = KdeConfig::new(0.04, 1024, DEFAULT_FLOOR).unwrap();
        assert!((cfg.k - 0.04857).abs() < 1e-5, "k = {}", cfg.k);
        assert!((cfg.k_g - KERNEL_GRAD_L2_SQ / (1024.0 * 0.04f64.powi(4))).abs() < 1e-9);
    }

    #[test]
    fn noise_models_respect_the_floor() {
        let g = Grid::unit_square(5).unwrap();
        let cfg = KdeConfig { bandwidth: 0.1, k: 0.01, k_g: 2.0, floor_eps: 1e-6 };
        let r = noise_cov_density(&ScalarField::constant(&g, 1.0), &cfg);
        assert!(r.diag().iter().all(|d| (d - 0.01).abs() < 1e-15));
        let mut p = ScalarField::constant(&g, 1.0);
        p.values_mut()[3] = 0.0;
        assert_eq!(noise_cov_density(&p, &cfg).diag()[3], 1e-6);
        let rg = noise_cov_gradient(&VectorField::zeros(&g), &cfg);
        assert!(rg.diag().iter().all(|d| *d == 1e-6));
        let q = VectorField::from_fn(&g, |x, _| (-x, 0.0));
        let rg = noise_cov_gradient(&q, &cfg);
        assert!(rg.diag().iter().all(|d| *d >= 1e-6));
        assert!((rg.diag()[0] - 2.0 * g.x_center(0)).abs() < 1e-15);
        let (lo, hi) = r.precision_bounds();
        assert!((lo - 100.0).abs() < 1e-9 && (hi - 100.0).abs() < 1e-9);
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(KdeConfig::new(0.0, 10, 1e-6).is_err());
        assert!(KdeConfig::new(0.1, 10, 0.0).is_err());
        assert!(KdeConfig::new(0.1, 0, 1e-6).is_err());
        assert!(kde_density(&[], 0.1, &Grid::unit_square(3).unwrap()).is_err());
    }

    #[test]
    #[ignore = "statistical; takes a few seconds"]
    fn error_shrinks_with_sample_size() {
        // against K_h * p for p uniform: the same KDE with infinitely many samples
        let g = Grid::unit_square(20).unwrap();
        let h = 0.08;
        let fine = {
            let n = 400;
            let pts: Vec<[f64; 2]> = (0..n * n)
                .map(|k| [((k % n) as f64 + 0.5) / n as f64, ((k / n) as f64 + 0.5) / n as f64])
                .collect();
            kde_density(&pts, h, &g).unwrap()
        };
        let mean_err = |n: usize| {
            (0..20)
                .map(|s| {
                    let p = kde_density(&uniform_samples(n, 100 + s), h, &g).unwrap();
                    crate::diagnostics::l2(&(&p - &fine))
                })
                .sum::<f64>()
                / 20.0
        };
        let e: Vec<f64> = [1_000, 10_000, 100_000].iter().map(|&n| mean_err(n)).collect();
        assert!(e[0] > e[1] && e[1] > e[2], "{e:?}");
    }
}
