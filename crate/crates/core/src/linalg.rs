//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{linalg::Schur, Complex, DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

const SCHUR_MAX_ITER: usize = 10_000;
const SCHUR_TOLERANCES: [f64; 3] = [f64::EPSILON, 16.0 * f64::EPSILON, 1e-12];

/// Eigenvalues of a general real square matrix via the real Schur form.
pub fn eigenvalues(m: &Mat) -> Result<Vec<Complex<f64>>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "eigenvalues of a non-square {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite matrix entry".into()));
    }
    // the QR sweep can stall at machine precision on repeated eigenvalues
    for eps in SCHUR_TOLERANCES {
        if let Some(schur) = Schur::try_new(m.clone(), eps, SCHUR_MAX_ITER) {
            return Ok(schur.complex_eigenvalues().iter().copied().collect());
        }
    }
    Err(Error::Numerical(
        "Schur decomposition did not converge".into(),
    ))
}

/// Largest real part over the spectrum.
pub fn spectral_abscissa(m: &Mat) -> Result<f64> {
    Ok(eigenvalues(m)?
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Smallest real part over the spectrum.
pub fn min_real_eigenvalue(m: &Mat) -> Result<f64> {
    Ok(eigenvalues(m)?
        .iter()
        .map(|z| z.re)
        .fold(f64::INFINITY, f64::min))
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &Mat) -> Vector {
    let mut ev = symmetrize(m).symmetric_eigenvalues();
    ev.as_mut_slice().sort_by(f64::total_cmp);
    ev
}

pub fn min_sym_eigenvalue(m: &Mat) -> f64 {
    sym_eigenvalues(m)
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_sym_eigenvalue(m: &Mat) -> f64 {
    sym_eigenvalues(m)
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Spectral norm (largest singular value).
pub fn norm2(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Numerical rank with singular values below `rel_tol * sigma_max` treated as zero.
pub fn rank(m: &Mat, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

pub fn hstack(blocks: &[Mat], rows: usize) -> Result<Mat> {
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut c0 = 0;
    for b in blocks {
        if b.nrows() != rows {
            return Err(Error::Dimension(format!(
                "hstack: block has {} rows, expected {rows}",
                b.nrows()
            )));
        }
        out.view_mut((0, c0), (rows, b.ncols())).copy_from(b);
        c0 += b.ncols();
    }
    Ok(out)
}

pub fn vstack(blocks: &[Mat], cols: usize) -> Result<Mat> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut r0 = 0;
    for b in blocks {
        if b.ncols() != cols {
            return Err(Error::Dimension(format!(
                "vstack: block has {} columns, expected {cols}",
                b.ncols()
            )));
        }
        out.view_mut((r0, 0), (b.nrows(), cols)).copy_from(b);
        r0 += b.nrows();
    }
    Ok(out)
}

pub fn block_diag(blocks: &[Mat]) -> Mat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        out.view_mut((r0, c0), b.shape()).copy_from(b);
        r0 += b.nrows();
        c0 += b.ncols();
    }
    out
}

/// `[B, AB, A^2 B, ..., A^{n-1} B]`.
pub fn controllability_matrix(a: &Mat, b: &Mat) -> Mat {
    let n = a.nrows();
    let q = b.ncols();
    let mut out = Mat::zeros(n, n * q);
    let mut blk = b.clone();
    for k in 0..n {
        out.view_mut((0, k * q), (n, q)).copy_from(&blk);
        blk = a * &blk;
    }
    out
}

pub fn observability_matrix(a: &Mat, c: &Mat) -> Mat {
    controllability_matrix(&a.transpose(), &c.transpose()).transpose()
}

pub fn frobenius(m: &Mat) -> f64 {
    m.norm()
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Row-compressed copy of a dense matrix with exact zeros dropped. Every product
/// accumulates a row left to right, so equal rows give bit-equal results.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl RowMatrix {
    pub fn from_dense(m: &Mat) -> Self {
        let mut row_ptr = Vec::with_capacity(m.nrows() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let v = m[(r, c)];
                if v != 0.0 {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Self {
            nrows: m.nrows(),
            ncols: m.ncols(),
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    #[inline]
    pub fn row_dot(&self, r: usize, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for idx in self.row_ptr[r]..self.row_ptr[r + 1] {
            s += self.vals[idx] * x[self.cols[idx]];
        }
        s
    }

    /// `out = M x`.
    pub fn mul_into(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate().take(self.nrows) {
            *o = self.row_dot(r, x);
        }
    }

    /// `out += M x`.
    pub fn mul_add_into(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate().take(self.nrows) {
            *o += self.row_dot(r, x);
        }
    }
}

pub(crate) fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Dimension("ragged nested array".into()));
    }
    Ok(Mat::from_fn(nr, nc, |i, j| rows[i][j]))
}

pub(crate) fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}
