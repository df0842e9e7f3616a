//! Thin helpers over `faer` shared by the estimators.

use faer::linalg::matmul::matmul;
use faer::linalg::matmul::triangular::{self, BlockStructure};
use faer::linalg::solvers::Solve;
use faer::{Accum, Mat, MatRef, Par, Side};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Parallelism used for large products; small ones stay sequential.
pub(crate) fn par_for(flops: usize) -> Par {
    if flops < 1 << 24 {
        Par::Seq
    } else {
        faer::get_global_parallelism()
    }
}

/// Builds an `nrows × ncols` matrix from a row-major slice.
pub fn mat_from_row_major(data: &[f64], nrows: usize, ncols: usize) -> Mat<f64> {
    assert_eq!(data.len(), nrows * ncols);
    Mat::from_fn(nrows, ncols, |i, j| data[i * ncols + j])
}

pub fn mat_from_rows(rows: &[Vec<f64>]) -> Mat<f64> {
    let ncols = rows.first().map_or(0, Vec::len);
    Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

pub fn mat_to_rows(m: MatRef<'_, f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn col_to_vec(m: MatRef<'_, f64>, j: usize) -> Vec<f64> {
    (0..m.nrows()).map(|i| m[(i, j)]).collect()
}

pub fn column(v: &[f64]) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(v, v.len(), 1)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `aᵀ b` for matrix `a` and vector `b`.
pub fn mat_t_vec(a: MatRef<'_, f64>, b: &[f64]) -> Vec<f64> {
    assert_eq!(a.nrows(), b.len());
    let mut out = Mat::<f64>::zeros(a.ncols(), 1);
    matmul(
        out.as_mut(),
        Accum::Replace,
        a.transpose(),
        column(b),
        1.0,
        par_for(a.nrows() * a.ncols()),
    );
    col_to_vec(out.as_ref(), 0)
}

/// `a b` for matrix `a` and vector `b`.
pub fn mat_vec(a: MatRef<'_, f64>, b: &[f64]) -> Vec<f64> {
    assert_eq!(a.ncols(), b.len());
    let mut out = Mat::<f64>::zeros(a.nrows(), 1);
    matmul(
        out.as_mut(),
        Accum::Replace,
        a,
        column(b),
        1.0,
        par_for(a.nrows() * a.ncols()),
    );
    col_to_vec(out.as_ref(), 0)
}

pub fn matmul_new(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    assert_eq!(a.ncols(), b.nrows());
    let mut out = Mat::<f64>::zeros(a.nrows(), b.ncols());
    matmul(
        out.as_mut(),
        Accum::Replace,
        a,
        b,
        1.0,
        par_for(a.nrows() * a.ncols() * b.ncols()),
    );
    out
}

/// `xᵀx`, computing only the lower triangle and mirroring it.
pub fn gram(x: MatRef<'_, f64>) -> Mat<f64> {
    let n = x.ncols();
    let mut g = Mat::<f64>::zeros(n, n);
    triangular::matmul(
        g.as_mut(),
        BlockStructure::TriangularLower,
        Accum::Replace,
        x.transpose(),
        BlockStructure::Rectangular,
        x,
        BlockStructure::Rectangular,
        1.0,
        par_for(x.nrows() * n * n),
    );
    for j in 0..n {
        for i in 0..j {
            g[(i, j)] = g[(j, i)];
        }
    }
    g
}

/// Symmetric eigendecomposition with eigenvalues in ascending order.
pub fn symmetric_eigen(a: MatRef<'_, f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::LinAlg(format!("eigendecomposition failed: {e:?}")))?;
    let s = evd.S();
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    let vals: Vec<f64> = (0..n).map(|i| s[i]).collect();
    order.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]));
    let u = evd.U();
    let vectors = Mat::from_fn(n, n, |i, k| u[(i, order[k])]);
    Ok((order.iter().map(|&i| vals[i]).collect(), vectors))
}

/// Projects a symmetric matrix onto the PSD cone by clipping eigenvalues
/// below `floor` to zero.
pub fn psd_project(a: MatRef<'_, f64>, floor: f64) -> Result<Mat<f64>> {
    let n = a.nrows();
    let sym = Mat::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let (vals, vecs) = symmetric_eigen(sym.as_ref())?;
    Ok(Mat::from_fn(n, n, |i, j| {
        (0..n)
            .filter(|&k| vals[k] >= floor)
            .map(|k| vals[k] * vecs[(i, k)] * vecs[(j, k)])
            .sum()
    }))
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub fn solve_spd(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Result<Mat<f64>> {
    let llt = a
        .llt(Side::Lower)
        .map_err(|e| Error::LinAlg(format!("Cholesky factorization failed: {e:?}")))?;
    Ok(llt.solve(b))
}

/// Solves `a x = b` with partial pivoting; used by test oracles and small
/// dense systems.
pub fn solve_general(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    a.partial_piv_lu().solve(b)
}

pub fn inverse_spd(a: MatRef<'_, f64>) -> Result<Mat<f64>> {
    let n = a.nrows();
    solve_spd(a, Mat::<f64>::identity(n, n).as_ref())
}

/// Two-sided standard normal critical value `z_{1-(1-level)/2}`.
pub fn normal_critical(level: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.inverse_cdf(0.5 + 0.5 * level)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").cdf(x)
}

pub fn normal_inverse_cdf(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    linspace(lo.ln(), hi.ln(), n).into_iter().map(f64::exp).collect()
}
