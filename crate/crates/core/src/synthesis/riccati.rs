//! Stabilizing solutions of `A^T P + P A - P B B^T P + T = 0` by Newton-Kleinman.

use crate::error::{Error, Result};
use crate::graph::SPECTRAL_TOL;
use crate::linalg::{self, Mat};

use super::lyapunov::solve_lyapunov;

/// Acceptance threshold on the scale-aware relative residual.
pub const CARE_TOL: f64 = 1e-8;

const NK_MAX_ITER: usize = 80;

#[derive(Debug, Clone, PartialEq)]
pub struct CareSolution {
    pub p: Mat,
    /// `||res||_F / ||T||_F`.
    pub residual: f64,
    /// `||res||_F / (||T||_F + ||A^T P + P A||_F + ||P B B^T P||_F)`.
    pub scaled_residual: f64,
    pub iterations: usize,
}

pub fn solve_care(a: &Mat, b: &Mat, t: &Mat) -> Result<Mat> {
    solve_care_detailed(a, b, t).map(|s| s.p)
}

/// Solution of `Q A^T + A Q - Q C^T C Q + T = 0`, via `solve_care(A^T, C^T, T)`.
pub fn solve_dual_care(a: &Mat, c: &Mat, t: &Mat) -> Result<Mat> {
    solve_care(&a.transpose(), &c.transpose(), t)
}

pub fn solve_dual_care_detailed(a: &Mat, c: &Mat, t: &Mat) -> Result<CareSolution> {
    solve_care_detailed(&a.transpose(), &c.transpose(), t)
}

pub fn care_residual(a: &Mat, b: &Mat, t: &Mat, p: &Mat) -> Mat {
    let pb = p * b;
    a.transpose() * p + p * a - &pb * pb.transpose() + t
}

pub(crate) fn validate_spd(t: &Mat, what: &str) -> Result<()> {
    if !t.is_square() {
        return Err(Error::Dimension(format!("{what} must be square")));
    }
    let asym = (t - t.transpose()).norm();
    if asym > 1e-12 * t.norm().max(f64::MIN_POSITIVE) {
        return Err(Error::Precondition(format!("{what} is not symmetric")));
    }
    if !(linalg::min_sym_eigenvalue(t) > 0.0) {
        return Err(Error::Precondition(format!(
            "{what} is not positive definite"
        )));
    }
    Ok(())
}

pub fn solve_care_detailed(a: &Mat, b: &Mat, t: &Mat) -> Result<CareSolution> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || t.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "CARE with A {:?}, B {:?}, T {:?}",
            a.shape(),
            b.shape(),
            t.shape()
        )));
    }
    validate_spd(t, "CARE weight T")?;

    let mut k = initial_gain(a, b)?;
    let mut p = Mat::zeros(n, n);
    let mut iterations = 0;
    for it in 0..NK_MAX_ITER {
        iterations = it + 1;
        let acl = a - b * &k;
        let rhs = t + k.transpose() * &k;
        let p_next = solve_lyapunov(&acl, &rhs).map_err(|e| Error::Synthesis {
            reason: format!("Newton-Kleinman step {iterations}: {e}"),
            residual: None,
        })?;
        let change = (&p_next - &p).norm();
        p = p_next;
        k = b.transpose() * &p;
        if it > 0 && change <= 1e-14 * p.norm() {
            break;
        }
    }

    let res = care_residual(a, b, t, &p);
    let pb = &p * b;
    let scale = t.norm() + (a.transpose() * &p + &p * a).norm() + (&pb * pb.transpose()).norm();
    let residual = res.norm() / t.norm();
    let scaled_residual = res.norm() / scale;
    if !(scaled_residual <= CARE_TOL) {
        return Err(Error::Synthesis {
            reason: "Riccati iteration did not converge".into(),
            residual: Some(scaled_residual),
        });
    }
    let closed = a - b * b.transpose() * &p;
    if linalg::spectral_abscissa(&closed)? >= 0.0 {
        return Err(Error::Synthesis {
            reason: "Riccati solution is not stabilizing".into(),
            residual: Some(scaled_residual),
        });
    }
    Ok(CareSolution {
        p,
        residual,
        scaled_residual,
        iterations,
    })
}

/// Stabilizing `K0` with `A - B K0` Hurwitz. Zero when `A` is already Hurwitz,
/// otherwise Bass's construction `K0 = B^T Z^{-1}` with
/// `(A + b I) Z + Z (A + b I)^T = 2 B B^T`, `b = ||A||_F + 1`.
fn initial_gain(a: &Mat, b: &Mat) -> Result<Mat> {
    let n = a.nrows();
    if linalg::spectral_abscissa(a)? < -SPECTRAL_TOL {
        return Ok(Mat::zeros(b.ncols(), n));
    }
    let not_stabilizable = || Error::Synthesis {
        reason: "no stabilizing initial gain: (A, B) is not stabilizable".into(),
        residual: None,
    };
    if b.ncols() == 0 {
        return Err(not_stabilizable());
    }
    let beta = a.norm() + 1.0;
    let shifted = -(a + Mat::identity(n, n) * beta).transpose();
    let z = solve_lyapunov(&shifted, &(b * b.transpose() * 2.0))?;
    if linalg::min_sym_eigenvalue(&z) <= 1e-14 * linalg::max_sym_eigenvalue(&z) {
        return Err(not_stabilizable());
    }
    let zinv = z.try_inverse().ok_or_else(not_stabilizable)?;
    let k0 = b.transpose() * zinv;
    if linalg::spectral_abscissa(&(a - b * &k0))? >= 0.0 {
        return Err(not_stabilizable());
    }
    Ok(k0)
}
