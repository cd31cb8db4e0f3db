use std::sync::Arc;

use nalgebra::DMatrix;

use super::fokker_planck::{assemble_fp_operator, OperatorMatrix};
use super::integration::IntegrationOperator;
use crate::error::Result;
use crate::grid::{Grid, VectorField};

/// Generator of the gradient dynamics, `A_g = G · A · G⁺`, acting on the
/// stacked `2M` gradient state.
///
/// Pinning the antigradient by mass makes the exact gradient dynamics
/// affine: for a density of mass `m`, `d(Gp)/dt = A_g (Gp) + b` with
/// `b = (m / |Ω|) · G (A 1)`. The drift `b` vanishes whenever uniform
/// densities are stationary (`A 1 = 0`, e.g. pure diffusion); only the
/// linear part enters covariance propagation.
#[derive(Clone, Debug)]
pub struct GradientOperator {
    fp: OperatorMatrix,
    integrator: Arc<IntegrationOperator>,
    drift: Vec<f64>,
}

impl GradientOperator {
    pub fn new(fp: OperatorMatrix, integrator: Arc<IntegrationOperator>, total_mass: f64) -> Self {
        let grid = *fp.grid();
        let ones = vec![total_mass / grid.domain().area(); grid.len()];
        let mut a_ones = vec![0.0; grid.len()];
        fp.apply_into(&ones, &mut a_ones);
        let drift = sparse_apply(integrator.gradient_matrix(), &a_ones);
        Self {
            fp,
            integrator,
            drift,
        }
    }

    pub fn fp_operator(&self) -> &OperatorMatrix {
        &self.fp
    }

    pub fn grid(&self) -> &Grid {
        self.fp.grid()
    }

    pub fn dim(&self) -> usize {
        2 * self.fp.dim()
    }

    /// Affine drift of the mass-pinned gradient dynamics.
    pub fn drift(&self) -> &[f64] {
        &self.drift
    }

    /// `A_g q` on a stacked gradient.
    pub fn apply_linear(&self, q: &[f64]) -> Vec<f64> {
        let f = self.integrator.apply_linear(q);
        let mut af = vec![0.0; f.len()];
        self.fp.apply_into(&f, &mut af);
        sparse_apply(self.integrator.gradient_matrix(), &af)
    }

    pub fn apply(&self, q: &VectorField) -> VectorField {
        VectorField::from_stacked(self.grid(), &self.apply_linear(&q.to_stacked()))
            .expect("operator and field share a grid")
    }

    /// `A_g q + b`, the exact rate of change of a unit-mass gradient.
    pub fn apply_affine(&self, q: &[f64]) -> Vec<f64> {
        let mut out = self.apply_linear(q);
        for (o, b) in out.iter_mut().zip(&self.drift) {
            *o += b;
        }
        out
    }

    /// `A_g X` for a dense `2M × k` matrix.
    pub fn left_mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let f = self.integrator.apply_linear_columns(x);
        let af = self.fp.matrix() * &f;
        self.integrator.gradient_matrix() * &af
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.left_mul(&DMatrix::identity(self.dim(), self.dim()))
    }
}

fn sparse_apply(m: &nalgebra_sparse::CsrMatrix<f64>, x: &[f64]) -> Vec<f64> {
    m.row_iter()
        .map(|row| {
            row.col_indices()
                .iter()
                .zip(row.values())
                .map(|(&c, &v)| v * x[c])
                .sum()
        })
        .collect()
}

/// Assembles `A_g` from scratch, pinning the antigradient to unit mass.
pub fn assemble_gradient_operator(v: &VectorField, sigma: f64, grid: &Grid) -> Result<GradientOperator> {
    let fp = assemble_fp_operator(v, sigma, grid)?;
    let integrator = Arc::new(IntegrationOperator::new(grid)?);
    Ok(GradientOperator::new(fp, integrator, 1.0))
}
