//! SVD-backed ridge regression with closed-form leave-one-out CV and a
//! bound-constrained variant.
//!
//! Penalties are exposed on the empirical-mean scale: the objective is
//! `(1/m)‖y − Xθ‖² + λ‖θ‖²`. Internally the sum-scale penalty `κ = mλ` is
//! used, so `θ = (XᵀX + κI)⁻¹Xᵀy`. The intercept is penalized like every
//! other coefficient.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, dot, par_for};
use crate::qp::{self, ConstraintRows, Hessian, QpOptions};
use crate::sieve::SieveDesign;

/// Singular values below this fraction of the largest are dropped.
pub const DEFAULT_RANK_TOL: f64 = 1e-12;
/// Relative eigenvalue cutoff when the SVD is formed from the Gram matrix.
/// Squaring loses half the digits, so the singular-value cutoff is
/// effectively `√GRAM_EIGEN_TOL`.
pub const GRAM_EIGEN_TOL: f64 = 1e-13;
/// Leverages at or above `1 − LEVERAGE_TOL` make LOOCV undefined.
pub const LEVERAGE_TOL: f64 = 1e-12;
/// Column counts above this use the Gram route.
const DIRECT_SVD_MAX_COLS: usize = 512;

/// Default LOOCV grid: 50 log-spaced points on `[1e-8, 1e2]`.
pub fn default_lambda_grid() -> Vec<f64> {
    linalg::logspace(1e-8, 1e2, 50)
}

/// Thin SVD `X = U diag(D) Vᵀ` with numerically null directions removed.
#[derive(Debug, Clone)]
pub struct SvdCache {
    pub u: Mat<f64>,
    /// Nonincreasing singular values.
    pub d: Vec<f64>,
    pub v: Mat<f64>,
    /// `1 − ‖U_i‖²`, the leverage left outside the column space.
    residual: Vec<f64>,
    nrows: usize,
    ncols: usize,
}

impl SvdCache {
    /// Decomposes `x` with the default rank tolerance.
    pub fn new(x: MatRef<'_, f64>) -> Result<Self> {
        Self::with_tol(x, DEFAULT_RANK_TOL)
    }

    pub fn with_tol(x: MatRef<'_, f64>, rel_tol: f64) -> Result<Self> {
        let (m, n) = (x.nrows(), x.ncols());
        if m.min(n) <= DIRECT_SVD_MAX_COLS {
            Self::direct(x, rel_tol)
        } else if m >= n {
            Self::from_gram(x, rel_tol)
        } else {
            Self::from_outer(x, rel_tol)
        }
    }

    fn direct(x: MatRef<'_, f64>, rel_tol: f64) -> Result<Self> {
        let fail = |e| Error::LinAlg(format!("SVD failed: {e:?}"));
        // Few rows: the full SVD also yields the orthogonal complement.
        let full = x.nrows() <= DIRECT_SVD_MAX_COLS;
        let svd = if full { x.svd().map_err(fail)? } else { x.thin_svd().map_err(fail)? };
        let s = svd.S();
        let k = x.nrows().min(x.ncols());
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
        let top = order.first().map_or(0.0, |&i| s[i]);
        let keep: Vec<usize> = order.into_iter().filter(|&i| top > 0.0 && s[i] > rel_tol * top).collect();
        let (u, v) = (svd.U(), svd.V());
        let thin_u = Mat::from_fn(x.nrows(), keep.len(), |i, c| u[(i, keep[c])]);
        let residual = if full {
            let mut kept = vec![false; u.ncols()];
            keep.iter().for_each(|&c| kept[c] = true);
            (0..x.nrows())
                .map(|i| (0..u.ncols()).filter(|&c| !kept[c]).map(|c| u[(i, c)] * u[(i, c)]).sum())
                .collect()
        } else {
            Self::residual_from(&thin_u)
        };
        Ok(Self {
            u: thin_u,
            d: keep.iter().map(|&i| s[i]).collect(),
            v: Mat::from_fn(x.ncols(), keep.len(), |i, c| v[(i, keep[c])]),
            residual,
            nrows: x.nrows(),
            ncols: x.ncols(),
        })
    }

    fn residual_from(u: &Mat<f64>) -> Vec<f64> {
        if u.ncols() == u.nrows() {
            return vec![0.0; u.nrows()];
        }
        (0..u.nrows())
            .map(|i| (1.0 - (0..u.ncols()).map(|k| u[(i, k)] * u[(i, k)]).sum::<f64>()).max(0.0))
            .collect()
    }

    fn keep_from_eigen(vals: &[f64], rel_tol: f64) -> Vec<usize> {
        let top = vals.last().copied().unwrap_or(0.0);
        let tol = GRAM_EIGEN_TOL.max(rel_tol * rel_tol);
        (0..vals.len())
            .rev()
            .filter(|&i| top > 0.0 && vals[i] > tol * top)
            .collect()
    }

    /// Eigen-decomposes `XᵀX`, then `U = X V D⁻¹`.
    fn from_gram(x: MatRef<'_, f64>, rel_tol: f64) -> Result<Self> {
        let g = linalg::gram(x);
        let (vals, vecs) = linalg::symmetric_eigen(g.as_ref())?;
        drop(g);
        let keep = Self::keep_from_eigen(&vals, rel_tol);
        let d: Vec<f64> = keep.iter().map(|&i| vals[i].sqrt()).collect();
        let v = Mat::from_fn(x.ncols(), keep.len(), |i, c| vecs[(i, keep[c])]);
        drop(vecs);
        let mut u = Mat::<f64>::zeros(x.nrows(), keep.len());
        matmul(
            u.as_mut(),
            Accum::Replace,
            x,
            v.as_ref(),
            1.0,
            par_for(x.nrows() * x.ncols() * keep.len()),
        );
        for (c, &dc) in d.iter().enumerate() {
            u.col_mut(c).iter_mut().for_each(|e| *e /= dc);
        }
        let residual = Self::residual_from(&u);
        Ok(Self {
            u,
            d,
            v,
            residual,
            nrows: x.nrows(),
            ncols: x.ncols(),
        })
    }

    /// Eigen-decomposes `XXᵀ`, then `V = XᵀU D⁻¹`.
    fn from_outer(x: MatRef<'_, f64>, rel_tol: f64) -> Result<Self> {
        let t = Self::from_gram(x.transpose(), rel_tol)?;
        let residual = Self::residual_from(&t.v);
        Ok(Self {
            u: t.v,
            d: t.d,
            v: t.u,
            residual,
            nrows: x.nrows(),
            ncols: x.ncols(),
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Effective rank `r`.
    pub fn rank(&self) -> usize {
        self.d.len()
    }

    pub fn full_column_rank(&self) -> bool {
        self.rank() == self.ncols
    }

    /// `κ = mλ`, rejecting `λ = 0` for rank-deficient designs.
    pub fn kappa(&self, lambda: f64) -> Result<f64> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be finite and nonnegative, got {lambda}")));
        }
        if lambda == 0.0 && !self.full_column_rank() {
            return Err(Error::RankDeficient {
                rank: self.rank(),
                cols: self.ncols,
            });
        }
        Ok(self.nrows as f64 * lambda)
    }

    /// `Uᵀy`.
    pub fn ut(&self, y: &[f64]) -> Vec<f64> {
        linalg::mat_t_vec(self.u.as_ref(), y)
    }

    /// `Vᵀb`.
    pub fn vt(&self, b: &[f64]) -> Vec<f64> {
        linalg::mat_t_vec(self.v.as_ref(), b)
    }

    /// `U c`.
    pub fn u_mul(&self, c: &[f64]) -> Vec<f64> {
        linalg::mat_vec(self.u.as_ref(), c)
    }

    /// `V c`.
    pub fn v_mul(&self, c: &[f64]) -> Vec<f64> {
        linalg::mat_vec(self.v.as_ref(), c)
    }

    /// `(XᵀX + κI)⁻¹ b`, including the component of `b` outside the row
    /// space of `X`, which is scaled by `1/κ`.
    pub fn solve_penalized(&self, b: &[f64], kappa: f64) -> Vec<f64> {
        let vb = self.vt(b);
        if kappa > 0.0 && !self.full_column_rank() {
            // V diag(1/(s² + κ)) Vᵀb + (I − VVᵀ) b / κ in one product with V.
            let scaled: Vec<f64> = vb
                .iter()
                .zip(&self.d)
                .map(|(c, s)| -c * s * s / (kappa * (s * s + kappa)))
                .collect();
            let mut out = self.v_mul(&scaled);
            for (o, bi) in out.iter_mut().zip(b) {
                *o += bi / kappa;
            }
            return out;
        }
        let scaled: Vec<f64> = vb.iter().zip(&self.d).map(|(c, s)| c / (s * s + kappa)).collect();
        self.v_mul(&scaled)
    }

    /// `(XᵀX + κI) θ`.
    pub fn apply_penalized(&self, theta: &[f64], kappa: f64) -> Vec<f64> {
        let vt = self.vt(theta);
        let scaled: Vec<f64> = vt.iter().zip(&self.d).map(|(c, s)| c * s * s).collect();
        let mut out = self.v_mul(&scaled);
        for (o, t) in out.iter_mut().zip(theta) {
            *o += kappa * t;
        }
        out
    }

    /// Leverages `h_ii = Σ_k U_ik² s_k` for a spectral filter `s`.
    pub fn filtered_leverage(&self, s: &[f64]) -> Vec<f64> {
        let m = self.nrows;
        let r = self.rank();
        (0..m)
            .map(|i| (0..r).map(|k| self.u[(i, k)] * self.u[(i, k)] * s[k]).sum())
            .collect()
    }

    /// `1 − h_i` for the filter `1 − c`, given the complement `c`, as a
    /// sum of nonnegative terms that stays accurate when `h_i` is near one.
    pub fn leverage_complement(&self, c: &[f64]) -> Vec<f64> {
        let r = self.rank();
        (0..self.nrows)
            .map(|i| self.residual[i] + (0..r).map(|k| self.u[(i, k)] * self.u[(i, k)] * c[k]).sum::<f64>())
            .collect()
    }

    /// `1 − ‖U_i‖²` for every row.
    pub fn residual_leverage(&self) -> &[f64] {
        &self.residual
    }
}

/// A ridge solution at one penalty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RidgeFit {
    pub theta: Vec<f64>,
    /// Penalty on the empirical-mean scale.
    pub lambda: f64,
    pub fitted: Vec<f64>,
    /// Leverages; absent for bound-constrained fits.
    pub hat_diag: Option<Vec<f64>>,
    /// Closed-form LOOCV error; absent when a leverage is numerically one
    /// or the fit is bound-constrained.
    pub loocv_error: Option<f64>,
}

fn shrink(svd: &SvdCache, kappa: f64) -> (Vec<f64>, Vec<f64>) {
    let coef: Vec<f64> = svd.d.iter().map(|&s| s / (s * s + kappa)).collect();
    let hat: Vec<f64> = svd.d.iter().map(|&s| s * s / (s * s + kappa)).collect();
    (coef, hat)
}

/// Mean squared leave-one-out residual given `1 − h_i`.
fn loocv_from(y: &[f64], fitted: &[f64], one_minus_h: &[f64]) -> Option<f64> {
    if one_minus_h.iter().any(|&v| v <= LEVERAGE_TOL) {
        return None;
    }
    let m = y.len() as f64;
    Some(
        y.iter()
            .zip(fitted)
            .zip(one_minus_h)
            .map(|((yi, fi), c)| ((yi - fi) / c).powi(2))
            .sum::<f64>()
            / m,
    )
}

/// Ridge regression at penalty `lambda` (empirical-mean scale).
pub fn ridge_solve(svd: &SvdCache, y: &[f64], lambda: f64) -> Result<RidgeFit> {
    if y.len() != svd.nrows() {
        return Err(Error::Dimension(format!("y has {} entries for {} rows", y.len(), svd.nrows())));
    }
    let kappa = svd.kappa(lambda)?;
    let uty = svd.ut(y);
    let (coef, hat) = shrink(svd, kappa);
    let theta = svd.v_mul(&uty.iter().zip(&coef).map(|(a, b)| a * b).collect::<Vec<_>>());
    let fitted = svd.u_mul(&uty.iter().zip(&hat).map(|(a, b)| a * b).collect::<Vec<_>>());
    let h = svd.filtered_leverage(&hat);
    let comp: Vec<f64> = svd.d.iter().map(|&s| kappa / (s * s + kappa)).collect();
    let loocv_error = loocv_from(y, &fitted, &svd.leverage_complement(&comp));
    Ok(RidgeFit {
        theta,
        lambda,
        fitted,
        hat_diag: Some(h),
        loocv_error,
    })
}

/// LOOCV errors along a penalty grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoocvPath {
    pub grid: Vec<f64>,
    /// `None` where the penalty was skipped.
    pub errors: Vec<Option<f64>>,
    pub best_index: usize,
    pub best_lambda: f64,
}

/// Evaluates LOOCV over `grid` and returns the minimizing penalty (first
/// index on ties). Penalties with a leverage numerically equal to one, or
/// `λ = 0` on a rank-deficient design, are skipped with a warning.
pub fn loocv_path(svd: &SvdCache, y: &[f64], grid: &[f64]) -> Result<LoocvPath> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("lambda grid is empty".into()));
    }
    if y.len() != svd.nrows() {
        return Err(Error::Dimension(format!("y has {} entries for {} rows", y.len(), svd.nrows())));
    }
    let m = svd.nrows();
    let r = svd.rank();
    let nl = grid.len();
    let uty = svd.ut(y);
    let mut kappas = Vec::with_capacity(nl);
    for &l in grid {
        match svd.kappa(l) {
            Ok(k) => kappas.push(Some(k)),
            Err(Error::RankDeficient { .. }) => {
                log::warn!("skipping lambda = 0 on a rank-deficient design");
                kappas.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    // Spectral filters for fitted values (scaled by Uᵀy) and their
    // complements for `1 − h`.
    let filt = Mat::from_fn(r, nl, |k, l| {
        kappas[l].map_or(0.0, |kappa| {
            let s2 = svd.d[k] * svd.d[k];
            s2 / (s2 + kappa)
        })
    });
    let comp = Mat::from_fn(r, nl, |k, l| {
        kappas[l].map_or(1.0, |kappa| {
            let s2 = svd.d[k] * svd.d[k];
            kappa / (s2 + kappa)
        })
    });
    let filt_y = Mat::from_fn(r, nl, |k, l| filt[(k, l)] * uty[k]);
    let mut fitted = Mat::<f64>::zeros(m, nl);
    matmul(fitted.as_mut(), Accum::Replace, svd.u.as_ref(), filt_y.as_ref(), 1.0, par_for(m * r * nl));
    let mut lev = Mat::from_fn(m, nl, |i, _| svd.residual[i]);
    const BLOCK: usize = 2048;
    let mut start = 0;
    while start < m {
        let rows = BLOCK.min(m - start);
        let sq = Mat::from_fn(rows, r, |i, k| {
            let v = svd.u[(start + i, k)];
            v * v
        });
        matmul(
            lev.as_mut().subrows_mut(start, rows),
            Accum::Add,
            sq.as_ref(),
            comp.as_ref(),
            1.0,
            par_for(rows * r * nl),
        );
        start += rows;
    }
    let mut errors = Vec::with_capacity(nl);
    for l in 0..nl {
        if kappas[l].is_none() {
            errors.push(None);
            continue;
        }
        let f = linalg::col_to_vec(fitted.as_ref(), l);
        let c = linalg::col_to_vec(lev.as_ref(), l);
        let e = loocv_from(y, &f, &c);
        if e.is_none() {
            log::warn!("skipping lambda = {}: a leverage is numerically one", grid[l]);
        }
        errors.push(e);
    }
    let mut best: Option<(usize, f64)> = None;
    for (l, e) in errors.iter().enumerate() {
        if let Some(e) = *e {
            if best.is_none_or(|(_, b)| e < b) {
                best = Some((l, e));
            }
        }
    }
    let (best_index, _) = best.ok_or(Error::AllLambdaSkipped)?;
    Ok(LoocvPath {
        grid: grid.to_vec(),
        errors,
        best_index,
        best_lambda: grid[best_index],
    })
}

/// `XᵀX + κI` through the SVD.
pub struct RidgeHessian<'a> {
    pub svd: &'a SvdCache,
    pub kappa: f64,
}

impl Hessian for RidgeHessian<'_> {
    fn dim(&self) -> usize {
        self.svd.ncols()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.svd.apply_penalized(x, self.kappa)
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.svd.solve_penalized(b, self.kappa)
    }
}

/// Rows `(e_j ⊗ Φ(z_g))ᵀθ` for every geography `g` and group `j`, indexed
/// `g·d + j`, with common bounds.
pub struct PureRowBounds<'a> {
    pub sieve: &'a SieveDesign,
    pub lo: f64,
    pub hi: f64,
}

impl ConstraintRows for PureRowBounds<'_> {
    fn len(&self) -> usize {
        self.sieve.m() * self.sieve.d()
    }

    fn lower(&self, _: usize) -> f64 {
        self.lo
    }

    fn upper(&self, _: usize) -> f64 {
        self.hi
    }

    fn dot(&self, i: usize, x: &[f64]) -> f64 {
        let (g, j) = (i / self.sieve.d(), i % self.sieve.d());
        let jj = self.sieve.j();
        (0..jj).map(|k| self.sieve.phi[(g, k)] * x[j * jj + k]).sum()
    }

    fn row(&self, i: usize) -> Vec<f64> {
        let (g, j) = (i / self.sieve.d(), i % self.sieve.d());
        let jj = self.sieve.j();
        let mut r = vec![0.0; self.sieve.ncols()];
        for k in 0..jj {
            r[j * jj + k] = self.sieve.phi[(g, k)];
        }
        r
    }

    fn apply_all(&self, x: &[f64]) -> Vec<f64> {
        let (d, jj) = (self.sieve.d(), self.sieve.j());
        let theta = Mat::from_fn(jj, d, |k, j| x[j * jj + k]);
        let vals = linalg::matmul_new(self.sieve.phi.as_ref(), theta.as_ref());
        (0..self.len()).map(|i| vals[(i / d, i % d)]).collect()
    }
}

/// Ridge fit with every `γ(e_j, z_g)` constrained to `[lo, hi]`.
///
/// `svd` decomposes `diag(s) X` and `y` is already scaled by `s`, where
/// `s` is the per-row loss weight root (all ones when unweighted). When the
/// unconstrained fit satisfies the bounds it is returned unchanged;
/// otherwise an active-set QP starts from the constant midpoint and the
/// fit carries no leverages.
pub fn ridge_solve_bounded(
    svd: &SvdCache,
    sieve: &SieveDesign,
    y: &[f64],
    lambda: f64,
    bounds: [f64; 2],
) -> Result<RidgeFit> {
    let [lo, hi] = bounds;
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("bounds must satisfy lo < hi, got [{lo}, {hi}]")));
    }
    let free = ridge_solve(svd, y, lambda)?;
    let rows = PureRowBounds { sieve, lo, hi };
    let viol_tol = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
    if rows.apply_all(&free.theta).iter().all(|&v| v >= lo - viol_tol && v <= hi + viol_tol) {
        return Ok(free);
    }
    let kappa = svd.kappa(lambda)?;
    let h = RidgeHessian { svd, kappa };
    // c = Xᵀy through the SVD.
    let c = svd.v_mul(&svd.ut(y).iter().zip(&svd.d).map(|(a, s)| a * s).collect::<Vec<_>>());
    let jj = sieve.j();
    let mut x0 = vec![0.0; sieve.ncols()];
    for j in 0..sieve.d() {
        x0[j * jj] = 0.5 * (lo + hi);
    }
    let sol = qp::solve(&h, &c, &[], &rows, x0, &QpOptions::default())?;
    log::info!("bounded fit: {} QP iterations, {} active bounds", sol.iterations, sol.active.len());
    let vt = svd.vt(&sol.x);
    let fitted = svd.u_mul(&vt.iter().zip(&svd.d).map(|(a, s)| a * s).collect::<Vec<_>>());
    Ok(RidgeFit {
        theta: sol.x,
        lambda,
        fitted,
        hat_diag: None,
        loocv_error: None,
    })
}

/// `‖Xᵀ(Xθ − y) + κθ‖` relative to `‖Xᵀy‖`, computed densely.
pub fn stationarity_residual(x: MatRef<'_, f64>, y: &[f64], theta: &[f64], kappa: f64) -> f64 {
    let fitted = linalg::mat_vec(x, theta);
    let resid: Vec<f64> = fitted.iter().zip(y).map(|(f, yi)| f - yi).collect();
    let mut g = linalg::mat_t_vec(x, &resid);
    for (gi, t) in g.iter_mut().zip(theta) {
        *gi += kappa * t;
    }
    let xty = linalg::mat_t_vec(x, y);
    dot(&g, &g).sqrt() / dot(&xty, &xty).sqrt().max(f64::MIN_POSITIVE)
}
