//! Small dense helpers that write into caller-owned slices so the particle loops
//! never allocate.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// `out += scale * a * x`
#[inline]
pub fn gemv(out: &mut [f64], a: &DMatrix<f64>, x: &[f64], scale: f64) {
    debug_assert_eq!(a.nrows(), out.len());
    debug_assert_eq!(a.ncols(), x.len());
    for (j, &xj) in x.iter().enumerate() {
        let s = scale * xj;
        if s == 0.0 {
            continue;
        }
        for (o, aij) in out.iter_mut().zip(a.column(j).iter()) {
            *o += aij * s;
        }
    }
}

/// `out += scale * a^T * x`
#[inline]
pub fn gemv_t(out: &mut [f64], a: &DMatrix<f64>, x: &[f64], scale: f64) {
    debug_assert_eq!(a.ncols(), out.len());
    debug_assert_eq!(a.nrows(), x.len());
    for (j, o) in out.iter_mut().enumerate() {
        let col = a.column(j);
        let mut acc = 0.0;
        for (aij, xi) in col.iter().zip(x) {
            acc += aij * xi;
        }
        *o += scale * acc;
    }
}

#[inline]
pub fn axpy(out: &mut [f64], x: &[f64], scale: f64) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += scale * v;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

fn symmetric_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetric_part(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn lambda_max(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(0.0)
}

pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

pub fn inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().try_inverse()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Solve the symmetric positive semi-definite system `g b = rhs` (several
/// right-hand sides as columns) by a truncated eigen-decomposition after
/// diagonal scaling. Returns the solution and the condition number of the scaled
/// matrix; directions with relative eigenvalue below `rcond` are dropped.
pub fn psd_solve(g: &DMatrix<f64>, rhs: &DMatrix<f64>, rcond: f64) -> (DMatrix<f64>, f64) {
    let p = g.nrows();
    let scale: DVector<f64> =
        DVector::from_iterator(p, (0..p).map(|i| if g[(i, i)] > 0.0 { 1.0 / g[(i, i)].sqrt() } else { 0.0 }));
    let gs = DMatrix::from_fn(p, p, |i, j| g[(i, j)] * scale[i] * scale[j]);
    let eig = SymmetricEigen::new(gs);
    let top = eig.eigenvalues.iter().fold(0.0_f64, |a, &v| a.max(v));
    let bottom = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    let cond = if bottom > 0.0 { top / bottom } else { f64::INFINITY };
    let mut inv = DMatrix::zeros(p, p);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > rcond * top && lam > 0.0 {
            let v = eig.eigenvectors.column(k);
            inv += (v * v.transpose()) / lam;
        }
    }
    let rs = DMatrix::from_fn(p, rhs.ncols(), |i, j| rhs[(i, j)] * scale[i]);
    let mut sol = inv * rs;
    for i in 0..p {
        for j in 0..sol.ncols() {
            sol[(i, j)] *= scale[i];
        }
    }
    (sol, cond)
}
