//! Continuous Lyapunov equation `A^T X + X A + Q = 0`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

/// Largest order solved through the vectorized `n^2 x n^2` system.
pub const KRONECKER_MAX_ORDER: usize = 12;

const SIGN_MAX_ITER: usize = 100;

/// Solves `a^T x + x a + q = 0` for `x`, dispatching on the order of `a`.
/// The sign-function route (orders above 12) requires `a` Hurwitz.
pub fn solve_lyapunov(a: &Mat, q: &Mat) -> Result<Mat> {
    check_dims(a, q)?;
    if a.nrows() <= KRONECKER_MAX_ORDER {
        solve_lyapunov_kronecker(a, q)
    } else {
        solve_lyapunov_sign(a, q)
    }
}

fn check_dims(a: &Mat, q: &Mat) -> Result<()> {
    if !a.is_square() || q.shape() != a.shape() {
        return Err(Error::Dimension(format!(
            "Lyapunov equation with A {:?} and Q {:?}",
            a.shape(),
            q.shape()
        )));
    }
    Ok(())
}

/// Column-major vectorization: `vec(A^T X + X A) = (I (x) A^T + A^T (x) I) vec X`.
pub fn solve_lyapunov_kronecker(a: &Mat, q: &Mat) -> Result<Mat> {
    check_dims(a, q)?;
    let n = a.nrows();
    let at = a.transpose();
    let eye = Mat::identity(n, n);
    let m = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = -DMatrix::from_column_slice(n * n, 1, q.as_slice());
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("Lyapunov operator is singular".into()))?;
    let x = Mat::from_column_slice(n, n, sol.as_slice());
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("Lyapunov solution is not finite".into()));
    }
    Ok(linalg::symmetrize(&x))
}

/// Matrix-sign iteration with determinant scaling; `a` must be Hurwitz.
pub fn solve_lyapunov_sign(a: &Mat, q: &Mat) -> Result<Mat> {
    check_dims(a, q)?;
    let n = a.nrows();
    let eye = Mat::identity(n, n);
    let mut e = a.clone();
    let mut w = q.clone();
    for _ in 0..SIGN_MAX_ITER {
        let lu = e.clone().lu();
        let det = lu.determinant();
        let einv = lu
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular iterate in sign-function Lyapunov".into()))?;
        let c = if det.is_finite() && det != 0.0 {
            det.abs().powf(-1.0 / n as f64)
        } else {
            1.0
        };
        let c = if c.is_finite() && c > 0.0 { c } else { 1.0 };
        let e_next = (&e * c + &einv / c) * 0.5;
        let w_next = (&w * c + einv.transpose() * &w * &einv / c) * 0.5;
        let step = (&e_next - &e).norm();
        e = e_next;
        w = w_next;
        if step <= 1e-13 * e.norm().max(1.0) {
            break;
        }
    }
    if (&e + &eye).norm() > 1e-8 * (n as f64).sqrt() {
        return Err(Error::Numerical(
            "sign-function Lyapunov iteration did not reach -I (A not Hurwitz?)".into(),
        ));
    }
    let x = linalg::symmetrize(&(w * 0.5));
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("Lyapunov solution is not finite".into()));
    }
    Ok(x)
}

/// `||a^T x + x a + q||_F`.
pub fn lyapunov_residual(a: &Mat, x: &Mat, q: &Mat) -> f64 {
    (a.transpose() * x + x * a + q).norm()
}
