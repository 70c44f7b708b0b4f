//! Dense linear-algebra helpers in weighted coordinates y = w^{1/2} u, where the
//! quadrature inner product becomes the Euclidean one.

use crate::error::{LabError, Result};
use crate::velocity_space::VelocityGrid;
use nalgebra::{Cholesky, ComplexField, DMatrix, Dyn, SymmetricEigen};

/// Largest node count for which dense matrices are formed.
pub const DENSE_NODE_GUARD: usize = 20_000;

pub fn check_guard(nodes: usize, limit: usize) -> Result<()> {
    if nodes > limit {
        Err(LabError::NodeGuard { nodes, limit })
    } else {
        Ok(())
    }
}

/// √w_i for the integration weights of the grid.
pub fn sqrt_weights(grid: &VelocityGrid) -> Vec<f64> {
    grid.weights().iter().map(|w| w.sqrt()).collect()
}

/// Columns: orthonormal collision invariants in weighted coordinates.
pub fn invariant_basis(grid: &VelocityGrid) -> DMatrix<f64> {
    let sw = sqrt_weights(grid);
    let basis = grid.basis();
    DMatrix::from_fn(grid.len(), basis.orthonormal.len(), |i, j| {
        basis.orthonormal[j][i] * sw[i]
    })
}

/// Orthonormal basis of the microscopic subspace N^⊥ in weighted coordinates.
pub fn micro_basis(grid: &VelocityGrid) -> DMatrix<f64> {
    let b = invariant_basis(grid);
    let n = grid.len();
    let q = DMatrix::<f64>::identity(n, n) - &b * b.transpose();
    let eig = SymmetricEigen::new(q);
    let cols: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    DMatrix::from_fn(n, cols.len(), |i, j| eig.eigenvectors[(i, cols[j])])
}

/// Micro projector I − P in weighted coordinates.
pub fn micro_projector(grid: &VelocityGrid) -> DMatrix<f64> {
    let b = invariant_basis(grid);
    DMatrix::<f64>::identity(grid.len(), grid.len()) - &b * b.transpose()
}

pub fn hermitian_part<T: ComplexField>(a: &DMatrix<T>) -> DMatrix<T> {
    (a + a.adjoint()) * T::from_real(nalgebra::convert(0.5))
}

/// Cholesky factor of a Hermitian matrix, or None unless it is positive definite.
///
/// The factorization itself succeeds for indefinite complex input (square roots of
/// negative pivots exist in ℂ), so the pivots are checked to be real and positive.
pub fn cholesky_pd<T: ComplexField<RealField = f64>>(a: &DMatrix<T>) -> Option<Cholesky<T, Dyn>> {
    let chol = hermitian_part(a).cholesky()?;
    let ok = chol.l_dirty().diagonal().iter().all(|d| {
        let re = d.clone().real();
        let im = d.clone().imaginary();
        re > 0.0 && re.is_finite() && im.abs() <= 1e-10 * re
    });
    ok.then_some(chol)
}

/// Eigenvalues (ascending) of the Hermitian pencil (A, B) with B positive definite.
pub fn generalized_eigenvalues<T: ComplexField<RealField = f64>>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
) -> Option<Vec<f64>> {
    let chol = cholesky_pd(b)?;
    let l = chol.l();
    let x = l.solve_lower_triangular(a)?;
    let c = l.solve_lower_triangular(&x.adjoint())?;
    let c = hermitian_part(&c);
    let mut ev: Vec<f64> = SymmetricEigen::new(c).eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Some(ev)
}

pub fn hermitian_eigenvalues<T: ComplexField<RealField = f64>>(a: &DMatrix<T>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(hermitian_part(a))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ev
}

/// Relative Frobenius size of the anti-Hermitian part.
pub fn asymmetry<T: ComplexField<RealField = f64>>(a: &DMatrix<T>) -> f64 {
    let anti = (a - a.adjoint()) * T::from_real(0.5);
    let n = a.norm();
    if n == 0.0 {
        0.0
    } else {
        anti.norm() / n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity_space::{build_grid, GridStrategy};

    #[test]
    fn micro_basis_spans_complement() {
        let g = build_grid(2, 5, GridStrategy::GaussHermiteTensor).unwrap();
        let u = micro_basis(&g);
        assert_eq!(u.ncols(), g.len() - 4);
        let b = invariant_basis(&g);
        assert!((b.transpose() * &u).norm() < 1e-10);
        let gram = u.transpose() * &u;
        assert!((gram - DMatrix::identity(u.ncols(), u.ncols())).norm() < 1e-10);
    }

    #[test]
    fn complex_cholesky_rejects_indefinite() {
        use num_complex::Complex64;
        let c = |x: f64| Complex64::new(x, 0.0);
        let a = DMatrix::from_row_slice(2, 2, &[c(1.0), c(0.0), c(0.0), c(-1.0)]);
        assert!(cholesky_pd(&a).is_none());
        let b = DMatrix::from_row_slice(
            2,
            2,
            &[
                c(2.0),
                Complex64::new(0.0, 1.0),
                Complex64::new(0.0, -1.0),
                c(2.0),
            ],
        );
        assert!(cholesky_pd(&b).is_some());
        assert!(cholesky_pd(&DMatrix::from_row_slice(1, 1, &[-1.0])).is_none());
    }

    #[test]
    fn generalized_eigenvalues_of_scaled_identity() {
        let a = DMatrix::<f64>::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 6.0]));
        let b = DMatrix::<f64>::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0]));
        let ev = generalized_eigenvalues(&a, &b).unwrap();
        assert!((ev[0] - 2.0).abs() < 1e-14 && (ev[1] - 3.0).abs() < 1e-14);
    }
}
