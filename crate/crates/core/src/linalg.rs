//! Dense kernels delegated to faer where nalgebra's are slow.

use faer::linalg::matmul::triangular::{self, BlockStructure};
use faer::linalg::matmul::matmul;
use faer::mat::{from_column_major_slice, from_column_major_slice_mut};
use faer::Parallelism;

/// `C ← β Aᵀ B`, all column-major: `A` is `k × m`, `B` is `k × n`, `C` is `m × n`.
pub(crate) fn mul_tn(c: &mut [f64], a: &[f64], b: &[f64], k: usize, beta: f64) {
    let m = a.len() / k.max(1);
    let n = b.len() / k.max(1);
    assert_eq!(c.len(), m * n);
    let a = from_column_major_slice::<f64>(a, k, m);
    let b = from_column_major_slice::<f64>(b, k, n);
    let c = from_column_major_slice_mut::<f64>(c, m, n);
    matmul(c, a.transpose(), b, None, beta, Parallelism::None);
}

/// `C ← C − Zᵀ Z` for square `Z` and symmetric `C`, filling both triangles.
pub(crate) fn sub_gram(c: &mut [f64], z: &[f64], n: usize) {
    {
        let zr = from_column_major_slice::<f64>(z, n, n);
        let cm = from_column_major_slice_mut::<f64>(c, n, n);
        triangular::matmul(
            cm,
            BlockStructure::TriangularLower,
            zr.transpose(),
            BlockStructure::Rectangular,
            zr,
            BlockStructure::Rectangular,
            Some(1.0),
            -1.0,
            Parallelism::None,
        );
    }
    for j in 0..n {
        for i in (j + 1)..n {
            c[i * n + j] = c[j * n + i];
        }
    }
}
