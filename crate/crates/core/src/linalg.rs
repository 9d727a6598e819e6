//! Dense linear-algebra helpers shared by the estimators and coverage code.
//!
//! Everything here is desk scale: matrices are at most a few thousand rows,
//! so we favour exact dense factorizations (pivoted LU, SVD, symmetric and
//! real Schur eigendecompositions) over iterative methods.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// A matrix is treated as singular when `sigma_min <= SINGULAR_RTOL * sigma_max`.
pub const SINGULAR_RTOL: f64 = 1e-10;

/// Eigenvalues of a PSD matrix below `EIGEN_FLOOR_RTOL * lambda_max` are
/// clamped to that floor before taking inverse roots.
pub const EIGEN_FLOOR_RTOL: f64 = 1e-12;

/// Smallest and largest singular values.
pub fn singular_value_range(m: &DMatrix<f64>) -> (f64, f64) {
    if m.is_empty() {
        return (0.0, 0.0);
    }
    let sv = m.clone().singular_values();
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    let smax = sv.iter().copied().fold(0.0, f64::max);
    (smin, smax)
}

pub fn is_invertible(m: &DMatrix<f64>) -> bool {
    let (smin, smax) = singular_value_range(m);
    smax > 0.0 && smin > SINGULAR_RTOL * smax
}

/// Solves `m x = rhs` by pivoted LU, or returns `None` when `m` is singular
/// by the [`SINGULAR_RTOL`] criterion.
pub fn solve(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if !is_invertible(m) {
        return None;
    }
    m.clone().lu().solve(rhs)
}

/// Matrix right-hand side version of [`solve`].
pub fn solve_matrix(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if !is_invertible(m) {
        return None;
    }
    m.clone().lu().solve(rhs)
}

/// Solves `m x = rhs` with pivoted LU, without the conditioning check.
/// Used for systems that are nonsingular by construction (`I - gamma P`).
pub fn solve_nonsingular(m: DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    m.lu()
        .solve(rhs)
        .expect("system is nonsingular by construction")
}

fn symmetric_eigen(sym: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let s = (sym + sym.transpose()) * 0.5;
    SymmetricEigen::new(s)
}

/// Smallest and largest eigenvalues of a symmetric matrix.
pub fn symmetric_eigen_range(sym: &DMatrix<f64>) -> (f64, f64) {
    let eig = symmetric_eigen(sym);
    let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn psd_power(sym: &DMatrix<f64>, power: f64) -> DMatrix<f64> {
    let eig = symmetric_eigen(sym);
    let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let floor = EIGEN_FLOOR_RTOL * lmax;
    let vals = eig.eigenvalues.map(|l| l.max(floor).powf(power));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Symmetric square root of a PSD matrix.
pub fn psd_sqrt(sym: &DMatrix<f64>) -> DMatrix<f64> {
    psd_power(sym, 0.5)
}

/// Symmetric inverse square root of a PSD matrix (eigenvalues floored).
pub fn psd_inv_sqrt(sym: &DMatrix<f64>) -> DMatrix<f64> {
    psd_power(sym, -0.5)
}

/// Minimum-norm least-squares solution of `a x ~ y`.
pub fn lstsq(a: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let (rows, cols) = a.shape();
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let eps = (rows.max(cols) as f64) * f64::EPSILON * smax;
    svd.solve(y, eps).expect("both factors were computed")
}

/// Max-norm residual of the least-squares fit of `y` onto the columns of `a`.
pub fn span_residual(a: &DMatrix<f64>, y: &DVector<f64>) -> (f64, DVector<f64>) {
    let x = lstsq(a, y);
    let r = (a * &x - y).amax();
    (r, x)
}

/// Spectral radius from the full set of (possibly complex) eigenvalues.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// `v^T m^{-1} v` for symmetric positive definite `m`; `None` if singular.
pub fn inverse_quadratic_form(m: &DMatrix<f64>, v: &DVector<f64>) -> Option<f64> {
    solve(m, v).map(|x| v.dot(&x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_has_unit_spectral_radius() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert!((spectral_radius(&m) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_sqrt_whitens() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let w = psd_inv_sqrt(&s);
        let id = &w * &s * &w;
        assert!((id - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
        let r = psd_sqrt(&s);
        assert!((&r * &r - &s).amax() < 1e-12);
    }

    #[test]
    fn singular_detection() {
        let z = DMatrix::<f64>::zeros(3, 3);
        assert!(!is_invertible(&z));
        assert!(solve(&z, &DVector::zeros(3)).is_none());
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-11]));
        assert!(!is_invertible(&d));
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-9]));
        assert!(is_invertible(&d));
    }

    #[test]
    fn lstsq_is_minimum_norm() {
        // two identical columns: minimum-norm solution splits the weight
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let y = DVector::from_vec(vec![2.0, 4.0]);
        let x = lstsq(&a, &y);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
        let (r, _) = span_residual(&a, &y);
        assert!(r < 1e-12);
    }
}
