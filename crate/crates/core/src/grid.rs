//! Cell-centered rectangular grids, fields sampled on them, and the
//! second-order finite-difference operators used everywhere else.
//!
//! Storage is row-major with `x` fastest: cell `(i, j)` lives at
//! `j * nx + i`. Boundary faces carry zero flux, so the flux-form
//! operators (`divergence`, `laplacian`) telescope to zero total mass.

use std::ops::{Add, Mul, Sub};

use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::error::{Error, Result};

/// Axis-aligned rectangle `(x_min, x_max) × (y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    /// Builds a rectangle; degenerate (zero-width) rectangles are allowed.
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let all_finite = [x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite());
        if !all_finite || x_max < x_min || y_max < y_min {
            return Err(Error::param(
                "rect",
                format!("[{x_min}, {x_max}] x [{y_min}, {y_max}] is not a valid rectangle"),
            ));
        }
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }

    pub const fn unit() -> Self {
        Self {
            x_min: 0.0,
            x_max: 1.0,
            y_min: 0.0,
            y_max: 1.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Closed-set membership.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn is_within(&self, outer: &Rect) -> bool {
        self.x_min >= outer.x_min
            && self.x_max <= outer.x_max
            && self.y_min >= outer.y_min
            && self.y_max <= outer.y_max
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    nx: usize,
    ny: usize,
    domain: Rect,
    dx: f64,
    dy: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, domain: Rect) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidGrid(format!("cell counts must be positive, got {nx}x{ny}")));
        }
        let dx = domain.width() / nx as f64;
        let dy = domain.height() / ny as f64;
        if !(dx > 0.0 && dy > 0.0) {
            return Err(Error::InvalidGrid("domain has zero extent".into()));
        }
        Ok(Self {
            nx,
            ny,
            domain,
            dx,
            dy,
        })
    }

    /// `n × n` cells on `(0,1)²`.
    pub fn unit_square(n: usize) -> Result<Self> {
        Self::new(n, n, Rect::unit())
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    pub fn domain(&self) -> &Rect {
        &self.domain
    }

    /// Number of cells.
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn min_spacing(&self) -> f64 {
        self.dx.min(self.dy)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn x_center(&self, i: usize) -> f64 {
        self.domain.x_min + (i as f64 + 0.5) * self.dx
    }

    #[inline]
    pub fn y_center(&self, j: usize) -> f64 {
        self.domain.y_min + (j as f64 + 0.5) * self.dy
    }

    /// Cell centers in storage order.
    pub fn centers(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.ny).flat_map(move |j| (0..self.nx).map(move |i| (self.x_center(i), self.y_center(j))))
    }

    /// Discrete gradient as a `2M × M` sparse matrix: rows `0..M` hold the
    /// x-derivative, rows `M..2M` the y-derivative. Same stencil as
    /// [`gradient`].
    pub fn gradient_matrix(&self) -> CsrMatrix<f64> {
        let m = self.len();
        let mut coo = CooMatrix::new(2 * m, m);
        for j in 0..self.ny {
            for i in 0..self.nx {
                let row = self.index(i, j);
                let sx = Stencil::derivative(self.nx, i, self.dx);
                for (&k, &w) in sx.offsets().iter().zip(sx.weights()) {
                    coo.push(row, self.index(k, j), w);
                }
                let sy = Stencil::derivative(self.ny, j, self.dy);
                for (&k, &w) in sy.offsets().iter().zip(sy.weights()) {
                    coo.push(m + row, self.index(i, k), w);
                }
            }
        }
        CsrMatrix::from(&coo)
    }

    /// 1-D derivative matrices `(Dx, Dy)` whose Kronecker sums make up the
    /// gradient matrix: `Gx = I_ny ⊗ Dx`, `Gy = Dy ⊗ I_nx`.
    pub fn derivative_matrices_1d(&self) -> (nalgebra::DMatrix<f64>, nalgebra::DMatrix<f64>) {
        (
            Stencil::matrix_1d(self.nx, self.dx),
            Stencil::matrix_1d(self.ny, self.dy),
        )
    }

    /// Five-point Neumann Laplacian as a sparse `M × M` matrix.
    pub fn laplacian_matrix(&self) -> CsrMatrix<f64> {
        let m = self.len();
        let (cx, cy) = (1.0 / (self.dx * self.dx), 1.0 / (self.dy * self.dy));
        let mut coo = CooMatrix::new(m, m);
        for j in 0..self.ny {
            for i in 0..self.nx {
                let row = self.index(i, j);
                let mut diag = 0.0;
                let mut push = |col: usize, w: f64| {
                    coo.push(row, col, w);
                    diag -= w;
                };
                if i > 0 {
                    push(self.index(i - 1, j), cx);
                }
                if i + 1 < self.nx {
                    push(self.index(i + 1, j), cx);
                }
                if j > 0 {
                    push(self.index(i, j - 1), cy);
                }
                if j + 1 < self.ny {
                    push(self.index(i, j + 1), cy);
                }
                coo.push(row, row, diag);
            }
        }
        CsrMatrix::from(&coo)
    }
}

/// Second-order first-derivative stencil along one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    idx: [usize; 3],
    w: [f64; 3],
    len: usize,
}

impl Stencil {
    /// Centered differences in the interior, one-sided second order at the
    /// ends; falls back to first order with two cells and zero with one.
    pub(crate) fn derivative(n: usize, i: usize, h: f64) -> Self {
        let half = 0.5 / h;
        match n {
            1 => Self {
                idx: [0; 3],
                w: [0.0; 3],
                len: 0,
            },
            2 => Self {
                idx: [0, 1, 0],
                w: [-1.0 / h, 1.0 / h, 0.0],
                len: 2,
            },
            _ if i == 0 => Self {
                idx: [0, 1, 2],
                w: [-3.0 * half, 4.0 * half, -half],
                len: 3,
            },
            _ if i == n - 1 => Self {
                idx: [n - 1, n - 2, n - 3],
                w: [3.0 * half, -4.0 * half, half],
                len: 3,
            },
            _ => Self {
                idx: [i - 1, i + 1, 0],
                w: [-half, half, 0.0],
                len: 2,
            },
        }
    }

    pub(crate) fn offsets(&self) -> &[usize] {
        &self.idx[..self.len]
    }

    pub(crate) fn weights(&self) -> &[f64] {
        &self.w[..self.len]
    }

    #[inline]
    fn apply(&self, f: impl Fn(usize) -> f64) -> f64 {
        self.offsets()
            .iter()
            .zip(self.weights())
            .map(|(&k, &w)| w * f(k))
            .sum()
    }

    fn matrix_1d(n: usize, h: f64) -> nalgebra::DMatrix<f64> {
        let mut d = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            let s = Self::derivative(n, i, h);
            for (&k, &w) in s.offsets().iter().zip(s.weights()) {
                d[(i, k)] += w;
            }
        }
        d
    }
}

/// One real value per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: &Grid, value: f64) -> Self {
        Self {
            grid: *grid,
            values: vec![value; grid.len()],
        }
    }

    /// Samples `f(x, y)` at every cell center.
    pub fn from_fn(grid: &Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            grid: *grid,
            values: grid.centers().map(|(x, y)| f(x, y)).collect(),
        }
    }

    pub fn from_values(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                actual: values.len(),
            });
        }
        Ok(Self {
            grid: *grid,
            values,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    /// `Σ f · dx · dy`.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_area()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Cellwise combination of two fields on the same grid.
    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.grid, other.grid);
        Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn check_same_grid(&self, grid: &Grid) -> Result<()> {
        if self.values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                actual: self.values.len(),
            });
        }
        Ok(())
    }
}

impl Add for &ScalarField {
    type Output = ScalarField;

    fn add(self, rhs: &ScalarField) -> ScalarField {
        self.zip_map(rhs, |a, b| a + b)
    }
}

impl Sub for &ScalarField {
    type Output = ScalarField;

    fn sub(self, rhs: &ScalarField) -> ScalarField {
        self.zip_map(rhs, |a, b| a - b)
    }
}

impl Mul<f64> for &ScalarField {
    type Output = ScalarField;

    fn mul(self, rhs: f64) -> ScalarField {
        self.map(|a| a * rhs)
    }
}

/// One real 2-vector per cell, stored as two component arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: Grid,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl VectorField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            grid: *grid,
            x: vec![0.0; grid.len()],
            y: vec![0.0; grid.len()],
        }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let (x, y) = grid.centers().map(|(x, y)| f(x, y)).unzip();
        Self { grid: *grid, x, y }
    }

    pub fn from_components(grid: &Grid, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        for len in [x.len(), y.len()] {
            if len != grid.len() {
                return Err(Error::DimensionMismatch {
                    expected: grid.len(),
                    actual: len,
                });
            }
        }
        Ok(Self { grid: *grid, x, y })
    }

    /// Inverse of [`VectorField::to_stacked`].
    pub fn from_stacked(grid: &Grid, stacked: &[f64]) -> Result<Self> {
        let m = grid.len();
        if stacked.len() != 2 * m {
            return Err(Error::DimensionMismatch {
                expected: 2 * m,
                actual: stacked.len(),
            });
        }
        Ok(Self {
            grid: *grid,
            x: stacked[..m].to_vec(),
            y: stacked[m..].to_vec(),
        })
    }

    /// `[x-components; y-components]`, the `2M` state ordering used by the
    /// gradient operators.
    pub fn to_stacked(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.x.len());
        out.extend_from_slice(&self.x);
        out.extend_from_slice(&self.y);
        out
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x_mut(&mut self) -> &mut [f64] {
        &mut self.x
    }

    pub fn y_mut(&mut self) -> &mut [f64] {
        &mut self.y
    }

    pub fn at(&self, idx: usize) -> [f64; 2] {
        [self.x[idx], self.y[idx]]
    }

    pub fn magnitude(&self) -> ScalarField {
        ScalarField {
            grid: self.grid,
            values: self.x.iter().zip(&self.y).map(|(a, b)| a.hypot(*b)).collect(),
        }
    }

    pub fn max_magnitude(&self) -> f64 {
        self.x
            .iter()
            .zip(&self.y)
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.y).all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            x: self.x.iter().map(|&v| f(v)).collect(),
            y: self.y.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &VectorField, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.grid, other.grid);
        Self {
            grid: self.grid,
            x: self.x.iter().zip(&other.x).map(|(&a, &b)| f(a, b)).collect(),
            y: self.y.iter().zip(&other.y).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

impl Add for &VectorField {
    type Output = VectorField;

    fn add(self, rhs: &VectorField) -> VectorField {
        self.zip_map(rhs, |a, b| a + b)
    }
}

impl Sub for &VectorField {
    type Output = VectorField;

    fn sub(self, rhs: &VectorField) -> VectorField {
        self.zip_map(rhs, |a, b| a - b)
    }
}

impl Mul<f64> for &VectorField {
    type Output = VectorField;

    fn mul(self, rhs: f64) -> VectorField {
        self.map(|a| a * rhs)
    }
}

/// Normal fluxes on cell faces. `x` has `(nx + 1) · ny` entries (face `i`
/// of row `j` at `j · (nx + 1) + i`), `y` has `nx · (ny + 1)` entries
/// (face `j` of column `i` at `j · nx + i`). Boundary entries are zero for
/// every flux built in this crate.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceFlux {
    grid: Grid,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl FaceFlux {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            grid: *grid,
            x: vec![0.0; (grid.nx + 1) * grid.ny],
            y: vec![0.0; grid.nx * (grid.ny + 1)],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
}

/// Cell-centered gradient: centered in the interior, one-sided second
/// order at boundary cells.
pub fn gradient(f: &ScalarField) -> VectorField {
    let g = f.grid;
    let v = &f.values;
    let mut out = VectorField::zeros(&g);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let sx = Stencil::derivative(g.nx, i, g.dx);
            let sy = Stencil::derivative(g.ny, j, g.dy);
            let idx = g.index(i, j);
            out.x[idx] = sx.apply(|k| v[g.index(k, j)]);
            out.y[idx] = sy.apply(|k| v[g.index(i, k)]);
        }
    }
    out
}

/// Flux-form divergence with face values averaged from the two adjacent
/// cells and zero flux through boundary faces.
pub fn divergence(field: &VectorField) -> ScalarField {
    let g = field.grid;
    let mut flux = FaceFlux::zeros(&g);
    for j in 0..g.ny {
        for i in 1..g.nx {
            flux.x[j * (g.nx + 1) + i] = 0.5 * (field.x[g.index(i - 1, j)] + field.x[g.index(i, j)]);
        }
    }
    for j in 1..g.ny {
        for i in 0..g.nx {
            flux.y[j * g.nx + i] = 0.5 * (field.y[g.index(i, j - 1)] + field.y[g.index(i, j)]);
        }
    }
    face_divergence(&flux)
}

/// Face-normal differences `(f_{i+1} − f_i)/dx` on interior faces, zero on
/// boundary faces (mirrored ghost cells).
pub fn face_gradient(f: &ScalarField) -> FaceFlux {
    let g = f.grid;
    let v = &f.values;
    let mut flux = FaceFlux::zeros(&g);
    for j in 0..g.ny {
        for i in 1..g.nx {
            flux.x[j * (g.nx + 1) + i] = (v[g.index(i, j)] - v[g.index(i - 1, j)]) / g.dx;
        }
    }
    for j in 1..g.ny {
        for i in 0..g.nx {
            flux.y[j * g.nx + i] = (v[g.index(i, j)] - v[g.index(i, j - 1)]) / g.dy;
        }
    }
    flux
}

/// Net outflow per unit area. Sums to zero over the grid whenever the
/// boundary fluxes vanish.
pub fn face_divergence(flux: &FaceFlux) -> ScalarField {
    let g = flux.grid;
    let mut out = ScalarField::zeros(&g);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let east = flux.x[j * (g.nx + 1) + i + 1];
            let west = flux.x[j * (g.nx + 1) + i];
            let north = flux.y[(j + 1) * g.nx + i];
            let south = flux.y[j * g.nx + i];
            out.values[g.index(i, j)] = (east - west) / g.dx + (north - south) / g.dy;
        }
    }
    out
}

/// Five-point Laplacian with zero-flux (mirrored) boundaries. Agrees with
/// `face_divergence(&face_gradient(f))` up to rounding.
pub fn laplacian(f: &ScalarField) -> ScalarField {
    let g = f.grid;
    let v = &f.values;
    let (cx, cy) = (1.0 / (g.dx * g.dx), 1.0 / (g.dy * g.dy));
    let mut out = ScalarField::zeros(&g);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let c = v[g.index(i, j)];
            // ghost cells mirror the boundary cell
            let west = if i > 0 { v[g.index(i - 1, j)] } else { c };
            let east = if i + 1 < g.nx { v[g.index(i + 1, j)] } else { c };
            let south = if j > 0 { v[g.index(i, j - 1)] } else { c };
            let north = if j + 1 < g.ny { v[g.index(i, j + 1)] } else { c };
            out.values[g.index(i, j)] = (west - 2.0 * c + east) * cx + (south - 2.0 * c + north) * cy;
        }
    }
    out
}
