//! Recovery of a scalar field from its discrete gradient.
//!
//! The least-squares problem `min ‖G f − q‖` has normal equations
//! `GᵀG f = Gᵀ q`. With `x` fastest, `G = [I ⊗ Dx; Dy ⊗ I]` so `GᵀG` is the
//! Kronecker sum `I ⊗ DxᵀDx + DyᵀDy ⊗ I`; diagonalizing the two small 1-D
//! blocks gives an exact pseudo-inverse at `O(nx·ny·(nx + ny))` per field.
//! The one-dimensional nullspace (constants) is pinned by total mass.

use nalgebra::{DMatrix, DMatrixViewMut};
use nalgebra_sparse::CsrMatrix;

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField, VectorField};
use crate::linalg::mul_tn;

/// Relative threshold below which an eigenvalue of `GᵀG` counts as zero.
const NULL_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct IntegrationOperator {
    grid: Grid,
    grad: CsrMatrix<f64>,
    grad_t: CsrMatrix<f64>,
    vx: DMatrix<f64>,
    vy: DMatrix<f64>,
    vy_t: DMatrix<f64>,
    /// `1/(λx_i + λy_j)` in spectral storage order, zero on the nullspace.
    inv_eig: Vec<f64>,
}

impl IntegrationOperator {
    pub fn new(grid: &Grid) -> Result<Self> {
        if grid.nx() < 2 || grid.ny() < 2 {
            return Err(Error::InvalidGrid(
                "the integration operator needs at least two cells per axis".into(),
            ));
        }
        let (dx, dy) = grid.derivative_matrices_1d();
        let ex = (dx.transpose() * &dx).symmetric_eigen();
        let ey = (dy.transpose() * &dy).symmetric_eigen();

        let largest = ex.eigenvalues.amax() + ey.eigenvalues.amax();
        let mut inv_eig = Vec::with_capacity(grid.len());
        let mut zero_modes = 0;
        for ly in ey.eigenvalues.iter() {
            for lx in ex.eigenvalues.iter() {
                let lambda = lx + ly;
                if lambda.abs() <= NULL_TOL * largest {
                    zero_modes += 1;
                    inv_eig.push(0.0);
                } else {
                    inv_eig.push(1.0 / lambda);
                }
            }
        }
        if zero_modes != 1 {
            return Err(Error::SingularPoisson { zero_modes });
        }

        let grad = grid.gradient_matrix();
        let grad_t = grad.transpose();
        Ok(Self {
            grid: *grid,
            grad,
            grad_t,
            vx: ex.eigenvectors,
            vy_t: ey.eigenvectors.transpose(),
            vy: ey.eigenvectors,
            inv_eig,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// The sparse `2M × M` gradient matrix `G`.
    pub fn gradient_matrix(&self) -> &CsrMatrix<f64> {
        &self.grad
    }

    /// Linear part `G⁺ q` (zero-mean least-squares solution) for a stacked
    /// `2M` gradient.
    pub fn apply_linear(&self, q: &[f64]) -> Vec<f64> {
        let cols = DMatrix::from_column_slice(q.len(), 1, q);
        self.apply_linear_columns(&cols).as_slice().to_vec()
    }

    /// `G⁺ Q` for every column of a `2M × k` matrix.
    pub fn apply_linear_columns(&self, q: &DMatrix<f64>) -> DMatrix<f64> {
        let (nx, ny) = (self.grid.nx(), self.grid.ny());
        let m = self.grid.len();
        assert_eq!(q.nrows(), 2 * m, "expected stacked gradient columns");
        let k = q.ncols();

        let rhs: DMatrix<f64> = &self.grad_t * q;
        // each column of `rhs` is an nx × ny column-major block
        let mut spectral = DMatrix::<f64>::zeros(nx, ny * k);
        mul_tn(spectral.as_mut_slice(), self.vx.as_slice(), rhs.as_slice(), nx, 1.0);

        let mut work = DMatrix::<f64>::zeros(nx, ny);
        for c in 0..k {
            let mut block = spectral.columns_mut(c * ny, ny);
            work.gemm(1.0, &block, &self.vy, 0.0);
            for (w, s) in work.iter_mut().zip(&self.inv_eig) {
                *w *= s;
            }
            block.gemm(1.0, &work, &self.vy_t, 0.0);
        }

        let mut out = DMatrix::<f64>::zeros(m, k);
        {
            let mut view = DMatrixViewMut::from_slice(out.as_mut_slice(), nx, ny * k);
            view.gemm(1.0, &self.vx, &spectral, 0.0);
        }
        out
    }

    /// `𝓘(q)`: the least-squares antigradient shifted to carry `total_mass`.
    pub fn integrate(&self, q: &VectorField, total_mass: f64) -> Result<ScalarField> {
        if q.grid().len() != self.grid.len() {
            return Err(Error::DimensionMismatch {
                expected: self.grid.len(),
                actual: q.grid().len(),
            });
        }
        if !q.is_finite() {
            return Err(Error::NonFinite("gradient field"));
        }
        let mut f = self.apply_linear(&q.to_stacked());
        let shift = (total_mass - f.iter().sum::<f64>() * self.grid.cell_area()) / self.grid.domain().area();
        for v in &mut f {
            *v += shift;
        }
        ScalarField::from_values(&self.grid, f)
    }

    /// Dense `M × 2M` matrix of the linear part.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let m = self.grid.len();
        self.apply_linear_columns(&DMatrix::identity(2 * m, 2 * m))
    }
}

/// One-shot form of [`IntegrationOperator::integrate`].
pub fn integration_op(q: &VectorField, total_mass: f64) -> Result<ScalarField> {
    IntegrationOperator::new(q.grid())?.integrate(q, total_mass)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::grid::{gradient, Rect};

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn zero_gradient_gives_uniform_density() {
        let g = Grid::unit_square(10).unwrap();
        let f = integration_op(&VectorField::zeros(&g), 1.0).unwrap();
        assert!(f.values().iter().all(|v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn round_trip_recovers_smooth_field() {
        let g = Grid::unit_square(30).unwrap();
        let f0 = ScalarField::from_fn(&g, |x, y| (PI * x).cos() * (PI * y).cos() + 2.0);
        let recovered = integration_op(&gradient(&f0), f0.mass()).unwrap();
        assert!(rel_err(recovered.values(), f0.values()) <= 1e-8);
    }

    #[test]
    fn round_trip_on_rectangular_grid() {
        let g = Grid::new(9, 14, Rect::new(-1.0, 2.0, 0.0, 0.5).unwrap()).unwrap();
        let f0 = ScalarField::from_fn(&g, |x, y| (x * y).sin() + x * x + 3.0);
        let recovered = integration_op(&gradient(&f0), f0.mass()).unwrap();
        assert!(rel_err(recovered.values(), f0.values()) <= 1e-10);
    }

    #[test]
    fn linear_part_is_linear_and_mass_free() {
        let g = Grid::new(8, 7, Rect::unit()).unwrap();
        let op = IntegrationOperator::new(&g).unwrap();
        let q1 = VectorField::from_fn(&g, |x, y| (x.sin(), (x * y).cos()));
        let q2 = VectorField::from_fn(&g, |x, y| (y * y, x - y));
        let (a, b) = (1.7, -0.4);
        let combo: Vec<f64> = q1
            .to_stacked()
            .iter()
            .zip(q2.to_stacked())
            .map(|(u, w)| a * u + b * w)
            .collect();
        let lhs = op.apply_linear(&combo);
        let r1 = op.apply_linear(&q1.to_stacked());
        let r2 = op.apply_linear(&q2.to_stacked());
        for i in 0..g.len() {
            assert!((lhs[i] - (a * r1[i] + b * r2[i])).abs() < 1e-10);
        }
        assert!(lhs.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn solves_the_normal_equations() {
        // dense oracle: GᵀG f = Gᵀ q for an arbitrary (non-gradient) q
        let g = Grid::new(6, 5, Rect::unit()).unwrap();
        let op = IntegrationOperator::new(&g).unwrap();
        let q = VectorField::from_fn(&g, |x, y| ((3.0 * y).sin(), x * x * y));
        let f = op.apply_linear(&q.to_stacked());
        let gd = {
            let mut d = DMatrix::<f64>::zeros(2 * g.len(), g.len());
            for (r, c, &v) in op.gradient_matrix().triplet_iter() {
                d[(r, c)] += v;
            }
            d
        };
        let lhs = gd.transpose() * &gd * nalgebra::DVector::from_vec(f);
        let rhs = gd.transpose() * nalgebra::DVector::from_vec(q.to_stacked());
        assert!((lhs - rhs).amax() < 1e-9);
    }

    #[test]
    fn batched_matches_columnwise() {
        let g = Grid::new(5, 4, Rect::unit()).unwrap();
        let op = IntegrationOperator::new(&g).unwrap();
        let q = DMatrix::from_fn(2 * g.len(), 3, |r, c| ((r * 7 + c * 13) % 5) as f64 - 2.0);
        let batched = op.apply_linear_columns(&q);
        for c in 0..3 {
            let col: Vec<f64> = q.column(c).iter().copied().collect();
            let single = op.apply_linear(&col);
            for r in 0..g.len() {
                assert!((batched[(r, c)] - single[r]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn needs_two_cells_per_axis() {
        let g = Grid::new(1, 5, Rect::unit()).unwrap();
        assert!(IntegrationOperator::new(&g).is_err());
    }
}
