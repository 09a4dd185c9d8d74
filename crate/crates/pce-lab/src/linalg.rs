//! Small dense linear-algebra helpers shared by the solvers.

use crate::error::{PceError, Result};
use crate::{Mat, Vector};

/// Relative eigenvalue floor used by every positive-definiteness test.
pub const SPD_TOL: f64 = 1e-10;

pub fn symmetrize(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part, ascending.
pub fn sym_eigenvalues(a: &Mat) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(a)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

/// `min eig > SPD_TOL * max(1, max eig)` on the symmetric part.
pub fn is_spd(a: &Mat) -> bool {
    if a.nrows() == 0 {
        return true;
    }
    let ev = sym_eigenvalues(a);
    let lo = ev[0];
    let hi = ev[ev.len() - 1];
    lo > SPD_TOL * hi.max(1.0)
}

pub fn require_spd(a: &Mat, what: &str) -> Result<()> {
    if is_spd(a) {
        Ok(())
    } else {
        Err(PceError::AssumptionViolated(format!(
            "{what} is not positive definite (eigenvalues {:?})",
            sym_eigenvalues(a)
        )))
    }
}

pub fn require_square(a: &Mat, d: usize, what: &str) -> Result<()> {
    if a.nrows() != d || a.ncols() != d {
        return Err(PceError::DimensionMismatch(format!(
            "{what}: expected {d}x{d}, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

pub fn require_len(v: &Vector, d: usize, what: &str) -> Result<()> {
    if v.len() != d {
        return Err(PceError::DimensionMismatch(format!(
            "{what}: expected length {d}, got {}",
            v.len()
        )));
    }
    Ok(())
}

pub fn singular_values(a: &Mat) -> Vec<f64> {
    let mut sv: Vec<f64> = a
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    sv.sort_by(|x, y| x.total_cmp(y));
    sv
}

pub fn min_singular_value(a: &Mat) -> f64 {
    singular_values(a).first().copied().unwrap_or(0.0)
}

/// 2-norm condition number; infinite for singular input.
pub fn condition_number(a: &Mat) -> f64 {
    let sv = singular_values(a);
    match (sv.first(), sv.last()) {
        (Some(&lo), Some(&hi)) if lo > 0.0 => hi / lo,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => 1.0,
    }
}

pub fn inverse(a: &Mat, what: &str) -> Result<Mat> {
    a.clone()
        .try_inverse()
        .ok_or_else(|| PceError::SingularPayoffMap(format!("{what} is singular")))
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub fn spd_inverse(a: &Mat, what: &str) -> Result<Mat> {
    let ch = symmetrize(a)
        .cholesky()
        .ok_or_else(|| PceError::AssumptionViolated(format!("{what} is not positive definite")))?;
    Ok(symmetrize(&ch.inverse()))
}

pub fn solve(a: &Mat, b: &Vector, what: &str) -> Result<Vector> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| PceError::SingularPayoffMap(format!("{what} is singular")))
}

pub fn solve_mat(a: &Mat, b: &Mat, what: &str) -> Result<Mat> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| PceError::SingularPayoffMap(format!("{what} is singular")))
}

/// Matrix exponential (scaling and squaring with Pade approximants).
pub fn expm(a: &Mat) -> Mat {
    if a.nrows() == 0 {
        return a.clone();
    }
    a.exp()
}

/// Lower-triangular factor `L` with `L L' = a` for positive semidefinite `a`.
///
/// Falls back to a symmetric square root when Cholesky fails, so that a
/// zero or rank-deficient covariance still yields a valid factor.
pub fn psd_factor(a: &Mat) -> Mat {
    let s = symmetrize(a);
    if let Some(ch) = s.clone().cholesky() {
        return ch.l();
    }
    let eig = s.symmetric_eigen();
    let mut root = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let r = lam.max(0.0).sqrt();
        for i in 0..root.nrows() {
            root[(i, j)] *= r;
        }
    }
    root
}

/// Symmetric power `a^s` of an SPD matrix.
pub fn spd_power(a: &Mat, s: f64, what: &str) -> Result<Mat> {
    require_spd(a, what)?;
    let eig = symmetrize(a).symmetric_eigen();
    let q = &eig.eigenvectors;
    let lam = Mat::from_diagonal(&eig.eigenvalues.map(|l| l.powf(s)));
    Ok(symmetrize(&(q * lam * q.transpose())))
}

pub fn max_abs(a: &Mat) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn max_abs_vec(v: &Vector) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn identity(d: usize) -> Mat {
    Mat::identity(d, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_cutoff_is_relative() {
        assert!(is_spd(&Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1e-9])));
        assert!(!is_spd(&Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1e-11])));
        assert!(!is_spd(&Mat::from_row_slice(2, 2, &[1e12, 0.0, 0.0, 1.0])));
        assert!(!is_spd(&Mat::from_row_slice(1, 1, &[-1.0])));
    }

    #[test]
    fn expm_scalar_and_rotation() {
        let e = expm(&Mat::from_element(1, 1, -2.0_f64.ln()));
        assert!((e[(0, 0)] - 0.5).abs() < 1e-15);
        let t = 0.7;
        let r = expm(&Mat::from_row_slice(2, 2, &[0.0, -t, t, 0.0]));
        assert!((r[(0, 0)] - t.cos()).abs() < 1e-14);
        assert!((r[(1, 0)] - t.sin()).abs() < 1e-14);
    }

    #[test]
    fn psd_factor_handles_zero() {
        let l = psd_factor(&Mat::zeros(2, 2));
        assert!(max_abs(&(&l * l.transpose())) < 1e-15);
    }
}
