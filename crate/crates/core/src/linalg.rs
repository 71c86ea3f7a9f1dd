//! Small dense solves shared by the σ estimate and the ridge baseline.

use nalgebra::{DMatrix, SymmetricEigen};

/// Eigenvalues below this fraction of the largest are treated as zero.
const RELATIVE_CUTOFF: f64 = 1e-12;

/// `G⁺ R` for symmetric positive semi-definite `G`, through its eigendecomposition.
pub(crate) fn sym_pinv_solve(g: DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(g);
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
    let cut = lmax * RELATIVE_CUTOFF;
    let mut proj = eig.eigenvectors.transpose() * rhs;
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        let scale = if l > cut && l > 0.0 { 1.0 / l } else { 0.0 };
        proj.row_mut(i).iter_mut().for_each(|v| *v *= scale);
    }
    &eig.eigenvectors * proj
}

/// Least-norm least-squares solution of `A X ≈ B`.
pub(crate) fn lstsq_min_norm(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    sym_pinv_solve(a.transpose() * a, &(a.transpose() * b))
}
