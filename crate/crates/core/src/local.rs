//! Per-geography estimates of the local coefficients `B_g`.
//!
//! The covariate-conditional mean `η̂(z_g)` is projected onto the
//! accounting-identity hyperplane `H_g = {b : bᵀx̄_g = ȳ_g}` along the
//! conditional covariance `Σ̂(z_g)`, then into the outcome bounds. The
//! covariance comes from a quadratic-in-`x̄` ridge fit of squared residuals,
//! read off by polarization. Chebyshev-type regions quantify uncertainty.

use std::io::Write;
use std::path::Path;

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::AggregateDataset;
use crate::dml::NuisanceFit;
use crate::error::{Error, Result};
use crate::linalg::{self, dot, mat_vec, psd_project};
use crate::qp::{self, ConstraintRows, DenseHessian, QpOptions};
use crate::ridge::{self, default_lambda_grid, LoocvPath, SvdCache};
use crate::sieve::{BasisSpec, FittedBasis};

/// Eigenvalues of `Σ̂(z)` below this are clipped to zero.
pub const PSD_FLOOR: f64 = 1e-10;
/// Diagonal loading applied when `Σ̂(z)` is numerically singular.
pub const SIGMA_RIDGE: f64 = 1e-8;

/// Number of distinct entries of a symmetric `d × d` matrix.
pub fn vech_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// `vech(x xᵀ)` in row order `(0,0), (0,1), …, (0,d−1), (1,1), …`.
pub fn quadratic_features(x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut out = Vec::with_capacity(vech_len(d));
    for a in 0..d {
        for b in a..d {
            out.push(x[a] * x[b]);
        }
    }
    out
}

/// The conditional residual variance `κ̂(x, z) = xᵀΣ̂(z)x` fitted as a
/// ridge regression of squared residuals on `vech(x̄x̄ᵀ) ⊗ Φ_κ(z)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionalCovariance {
    pub basis: FittedBasis,
    pub d: usize,
    /// Coefficients, pair-major: pair `q` occupies `qJ .. (q+1)J`.
    pub theta: Vec<f64>,
    pub lambda: f64,
    pub loocv: Option<LoocvPath>,
}

impl ConditionalCovariance {
    fn pair_coefficients(&self, phi: &[f64]) -> Vec<f64> {
        let jj = phi.len();
        (0..vech_len(self.d))
            .map(|q| dot(&self.theta[q * jj..(q + 1) * jj], phi))
            .collect()
    }

    fn phi(&self, z: &[f64]) -> Vec<f64> {
        let mut phi = vec![0.0; self.basis.len()];
        self.basis.eval_row(z, &mut phi);
        phi
    }

    /// `κ̂(x, z)`.
    pub fn kappa(&self, x: &[f64], z: &[f64]) -> f64 {
        dot(&self.pair_coefficients(&self.phi(z)), &quadratic_features(x))
    }

    /// `Σ̂(z)` by polarization of `κ̂`, before PSD projection.
    pub fn sigma_raw(&self, z: &[f64]) -> Mat<f64> {
        let coef = self.pair_coefficients(&self.phi(z));
        let d = self.d;
        let kappa = |x: &[f64]| dot(&coef, &quadratic_features(x));
        let unit = |j: usize| {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            e
        };
        let diag: Vec<f64> = (0..d).map(|j| kappa(&unit(j))).collect();
        Mat::from_fn(d, d, |a, b| {
            if a == b {
                diag[a]
            } else {
                let mut mid = vec![0.0; d];
                mid[a] = 0.5;
                mid[b] = 0.5;
                2.0 * (kappa(&mid) - 0.25 * diag[a] - 0.25 * diag[b])
            }
        })
    }

    /// `Σ̂(z)` with eigenvalues below [`PSD_FLOOR`] clipped to zero.
    pub fn sigma(&self, z: &[f64]) -> Result<Mat<f64>> {
        psd_project(self.sigma_raw(z).as_ref(), PSD_FLOOR)
    }
}

/// Fits `κ̂` to the squared outcome-regression residuals.
///
/// `lambda` of `None` selects the penalty by LOOCV over the default grid.
pub fn fit_kappa(
    data: &AggregateDataset,
    nuisance: &NuisanceFit,
    spec: &BasisSpec,
    lambda: Option<f64>,
) -> Result<ConditionalCovariance> {
    let residuals: Vec<f64> = data
        .ybar()
        .iter()
        .zip(&nuisance.gamma_fitted)
        .map(|(y, f)| y - f)
        .collect();
    fit_kappa_residuals(data, &residuals, spec, lambda)
}

/// As [`fit_kappa`] from explicit residuals.
pub fn fit_kappa_residuals(
    data: &AggregateDataset,
    residuals: &[f64],
    spec: &BasisSpec,
    lambda: Option<f64>,
) -> Result<ConditionalCovariance> {
    let m = data.m();
    let d = data.d();
    if residuals.len() != m {
        return Err(Error::Dimension(format!("{} residuals for {m} records", residuals.len())));
    }
    let basis = FittedBasis::fit(spec, data)?;
    let phi = basis.eval(&data.z_matrix());
    let jj = phi.ncols();
    let q = vech_len(d);
    let feats: Vec<Vec<f64>> = data.records().iter().map(|r| quadratic_features(&r.xbar)).collect();
    let design = Mat::from_fn(m, q * jj, |g, c| feats[g][c / jj] * phi[(g, c % jj)]);
    let svd = SvdCache::new(design.as_ref())?;
    drop(design);
    let y: Vec<f64> = residuals.iter().map(|r| r * r).collect();
    let (lambda, loocv) = match lambda {
        Some(l) => (l, None),
        None => {
            let path = ridge::loocv_path(&svd, &y, &default_lambda_grid())?;
            (path.best_lambda, Some(path))
        }
    };
    let fit = ridge::ridge_solve(&svd, &y, lambda)?;
    Ok(ConditionalCovariance {
        basis,
        d,
        theta: fit.theta,
        lambda,
        loocv,
    })
}

/// Orthonormal basis of `{b : bᵀx̄ = 0}` and the particular solution
/// `b₀ = ȳ x̄ / ‖x̄‖²`.
///
/// The basis is the trailing `d − 1` columns of `Q` in the QR factorization
/// of `(x̄  I_d)`, i.e. of the Householder reflector sending `x̄` to a
/// multiple of `e₁`.
pub fn hyperplane_basis(xbar: &[f64], ybar: f64) -> Result<(Mat<f64>, Vec<f64>)> {
    let d = xbar.len();
    let nrm = linalg::norm2(xbar);
    if !(nrm > 0.0) || !nrm.is_finite() {
        return Err(Error::InvalidArgument("shares vector has zero norm".into()));
    }
    let b0: Vec<f64> = xbar.iter().map(|x| ybar * x / (nrm * nrm)).collect();
    let sign = if xbar[0] >= 0.0 { 1.0 } else { -1.0 };
    let mut v: Vec<f64> = xbar.to_vec();
    v[0] += sign * nrm;
    let vv = dot(&v, &v);
    let q = Mat::from_fn(d, d, |i, j| f64::from(u8::from(i == j)) - 2.0 * v[i] * v[j] / vv);
    let h = Mat::from_fn(d, d - 1, |i, j| q[(i, j + 1)]);
    Ok((h, b0))
}

/// Point estimates for one geography.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalProjection {
    /// Oblique projection of `η̂` onto `H_g`.
    pub b_hat: Vec<f64>,
    /// `b_hat` further projected into the bounds (equal to `b_hat` when no
    /// bounds are given or they are already met).
    pub b_hat_prime: Vec<f64>,
    /// The projector `Π̂ = H (HᵀΣ̂⁻¹H)⁻¹ HᵀΣ̂⁻¹` acting on `η̂ − b₀`.
    pub pi_hat: Vec<Vec<f64>>,
    /// Orthonormal basis `[H_g]`, `d × (d−1)`.
    pub h_basis: Vec<Vec<f64>>,
    /// `HᵀΣ̂⁻¹H`: the region's shape in `H` coordinates.
    pub metric: Vec<Vec<f64>>,
}

fn regularized(sigma: &Mat<f64>) -> Result<Mat<f64>> {
    let d = sigma.nrows();
    let (vals, _) = linalg::symmetric_eigen(sigma.as_ref())?;
    let load = if vals.first().copied().unwrap_or(0.0) < SIGMA_RIDGE {
        SIGMA_RIDGE
    } else {
        0.0
    };
    Ok(Mat::from_fn(d, d, |i, j| {
        0.5 * (sigma[(i, j)] + sigma[(j, i)]) + if i == j { load } else { 0.0 }
    }))
}

/// Projects `η̂` onto the accounting-identity hyperplane in the `Σ̂⁻¹`
/// metric, then into `bounds` (if any) in the same metric.
pub fn project_local(
    eta: &[f64],
    sigma: &Mat<f64>,
    xbar: &[f64],
    ybar: f64,
    bounds: Option<[f64; 2]>,
) -> Result<LocalProjection> {
    let d = xbar.len();
    if eta.len() != d || sigma.nrows() != d || sigma.ncols() != d {
        return Err(Error::Dimension("eta, Sigma and shares disagree in dimension".into()));
    }
    let (h, b0) = hyperplane_basis(xbar, ybar)?;
    let s = regularized(sigma)?;
    let s_inv = linalg::inverse_spd(s.as_ref())?;
    let sih = linalg::matmul_new(s_inv.as_ref(), h.as_ref());
    let metric = linalg::matmul_new(h.transpose(), sih.as_ref());
    let (pi, b_hat) = if d == 1 {
        (Mat::zeros(1, 1), b0.clone())
    } else {
        let metric_inv = linalg::inverse_spd(metric.as_ref())?;
        // Π = H M⁻¹ (Σ⁻¹H)ᵀ
        let pi = linalg::matmul_new(
            linalg::matmul_new(h.as_ref(), metric_inv.as_ref()).as_ref(),
            sih.transpose(),
        );
        let shift: Vec<f64> = eta.iter().zip(&b0).map(|(e, b)| e - b).collect();
        let moved = mat_vec(pi.as_ref(), &shift);
        (pi, b0.iter().zip(&moved).map(|(b, m)| b + m).collect())
    };
    let b_hat = snap_to_hyperplane(b_hat, xbar, ybar);
    let b_hat_prime = match bounds {
        Some([lo, hi]) if b_hat.iter().any(|&b| b < lo || b > hi) => {
            if ybar < lo || ybar > hi {
                return Err(Error::Infeasible(format!("outcome {ybar} lies outside the bounds")));
            }
            let q = DenseHessian::new(s_inv.clone())?;
            let c = mat_vec(s_inv.as_ref(), &b_hat);
            let rows = qp::BoxRows {
                lower: vec![lo; d],
                upper: vec![hi; d],
            };
            let sol = qp::solve(&q, &c, &[(xbar.to_vec(), ybar)], &rows, vec![ybar; d], &QpOptions::default())?;
            sol.x.into_iter().map(|b| b.clamp(lo, hi)).collect()
        }
        _ => b_hat.clone(),
    };
    Ok(LocalProjection {
        b_hat,
        b_hat_prime,
        pi_hat: linalg::mat_to_rows(pi.as_ref()),
        h_basis: linalg::mat_to_rows(h.as_ref()),
        metric: linalg::mat_to_rows(metric.as_ref()),
    })
}

/// Removes the rounding-level violation of `bᵀx̄ = ȳ`.
fn snap_to_hyperplane(mut b: Vec<f64>, xbar: &[f64], ybar: f64) -> Vec<f64> {
    let gap = ybar - dot(&b, xbar);
    let nn = dot(xbar, xbar);
    b.iter_mut().zip(xbar).for_each(|(v, x)| *v += gap * x / nn);
    b
}

/// Confidence region `{b ∈ H' : (b − B̂')ᵀ(Π̂Σ̂Π̂ᵀ)⁺(b − B̂') ≤ (d−1)/α}`.
///
/// Points of `H` are written `b = B̂' + H w`, where the quadratic form is
/// `wᵀ(HᵀΣ̂⁻¹H)w`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalRegion {
    pub center: Vec<f64>,
    pub xbar: Vec<f64>,
    pub ybar: f64,
    pub h_basis: Vec<Vec<f64>>,
    pub metric: Vec<Vec<f64>>,
    pub alpha: f64,
    /// Squared radius `(d−1)/α`.
    pub radius_sq: f64,
    pub unimodal: bool,
    pub bounds: Option<[f64; 2]>,
}

impl LocalRegion {
    pub fn new(
        projection: &LocalProjection,
        xbar: &[f64],
        ybar: f64,
        alpha: f64,
        unimodal: bool,
        bounds: Option<[f64; 2]>,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        let d = xbar.len();
        Ok(Self {
            center: projection.b_hat_prime.clone(),
            xbar: xbar.to_vec(),
            ybar,
            h_basis: projection.h_basis.clone(),
            metric: projection.metric.clone(),
            alpha,
            radius_sq: (d as f64 - 1.0) / alpha,
            unimodal,
            bounds,
        })
    }

    fn d(&self) -> usize {
        self.center.len()
    }

    fn coords(&self, b: &[f64]) -> Vec<f64> {
        let k = self.d() - 1;
        (0..k)
            .map(|c| (0..self.d()).map(|i| self.h_basis[i][c] * (b[i] - self.center[i])).sum())
            .collect()
    }

    fn quad(&self, w: &[f64]) -> f64 {
        let k = w.len();
        (0..k)
            .map(|a| (0..k).map(|c| w[a] * self.metric[a][c] * w[c]).sum::<f64>())
            .sum()
    }

    /// `(b − B̂')ᵀ(Π̂Σ̂Π̂ᵀ)⁺(b − B̂')` for `b` on the hyperplane.
    pub fn distance_sq(&self, b: &[f64]) -> f64 {
        self.quad(&self.coords(b))
    }

    /// Whether `b` lies on `H`, within the bounds, and inside the ellipsoid.
    pub fn contains(&self, b: &[f64]) -> bool {
        let on_h = (dot(b, &self.xbar) - self.ybar).abs() <= 1e-8 * (1.0 + self.ybar.abs());
        let in_box = self
            .bounds
            .is_none_or(|[lo, hi]| b.iter().all(|&v| v >= lo - 1e-9 && v <= hi + 1e-9));
        on_h && in_box && self.distance_sq(b) <= self.radius_sq
    }

    /// Range of `b_j` over the joint region.
    pub fn component_interval(&self, j: usize) -> Result<[f64; 2]> {
        self.extent(j, self.radius_sq)
    }

    /// Interval for `b_j` alone from the one-dimensional Chebyshev bound,
    /// tightened by the Vysochanskij–Petunin inequality when `unimodal`.
    pub fn marginal_interval(&self, j: usize) -> Result<[f64; 2]> {
        self.extent(j, marginal_radius_sq(self.alpha, self.unimodal))
    }

    fn extent(&self, j: usize, r2: f64) -> Result<[f64; 2]> {
        let d = self.d();
        if j >= d {
            return Err(Error::Dimension(format!("component {j} out of range for d = {d}")));
        }
        if d == 1 {
            return Ok([self.center[0]; 2]);
        }
        let hj: Vec<f64> = self.h_basis[j].clone();
        let lo = self.extreme(&hj.iter().map(|v| -v).collect::<Vec<_>>(), r2)?;
        let hi = self.extreme(&hj, r2)?;
        Ok([self.center[j] - lo, self.center[j] + hi])
    }

    /// `max hᵀw` over `{wᵀMw ≤ r2} ∩ box`.
    fn extreme(&self, h: &[f64], r2: f64) -> Result<f64> {
        let k = h.len();
        let m = Mat::from_fn(k, k, |a, c| self.metric[a][c]);
        let m_inv = linalg::inverse_spd(m.as_ref())?;
        let hmh = dot(h, &mat_vec(m_inv.as_ref(), h));
        if hmh <= 0.0 {
            return Ok(0.0);
        }
        let Some([lo, hi]) = self.bounds else {
            return Ok((r2 * hmh).sqrt());
        };
        let scale = (r2 / hmh).sqrt();
        let w_free: Vec<f64> = mat_vec(m_inv.as_ref(), h).iter().map(|v| v * scale).collect();
        let inside = |w: &[f64]| {
            (0..self.d()).all(|i| {
                let b = self.center[i] + dot(&self.h_basis[i], w);
                b >= lo - 1e-12 && b <= hi + 1e-12
            })
        };
        if inside(&w_free) {
            return Ok(dot(h, &w_free));
        }
        if k == 1 {
            // A segment: clip t·sign(h) to the box.
            let dir = h[0].signum();
            let mut t = w_free[0].abs();
            for i in 0..self.d() {
                let slope = self.h_basis[i][0] * dir;
                if slope > 0.0 {
                    t = t.min((hi - self.center[i]) / slope);
                } else if slope < 0.0 {
                    t = t.min((lo - self.center[i]) / slope);
                }
            }
            return Ok(h[0].abs() * t.max(0.0));
        }
        let rows = HRows {
            h: &self.h_basis,
            lower: self.center.iter().map(|c| lo - c).collect(),
            upper: self.center.iter().map(|c| hi - c).collect(),
        };
        // Maximize hᵀw − μ wᵀMw over the box; wᵀMw falls as μ grows, and
        // the μ where it meets r2 gives the constrained maximum.
        let solve_at = |mu: f64| -> Result<Vec<f64>> {
            let q = DenseHessian::new(Mat::from_fn(k, k, |a, c| 2.0 * mu * m[(a, c)]))?;
            Ok(qp::solve(&q, h, &[], &rows, vec![0.0; k], &QpOptions::default())?.x)
        };
        let mu_free = hmh.sqrt() / (2.0 * r2.sqrt());
        let mut mu_hi = mu_free;
        let mut w = solve_at(mu_hi)?;
        while self.quad(&w) > r2 {
            mu_hi *= 2.0;
            w = solve_at(mu_hi)?;
        }
        let mut mu_lo = mu_hi;
        let floor = mu_free * 1e-10;
        let mut wl = w.clone();
        while self.quad(&wl) < r2 {
            if mu_lo < floor {
                return Ok(dot(h, &wl));
            }
            mu_lo *= 0.5;
            let next = solve_at(mu_lo)?;
            let step: f64 = next.iter().zip(&wl).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let size: f64 = wl.iter().fold(0.0, |a, v| a.max(v.abs()));
            if step <= 1e-13 * (1.0 + size) && self.quad(&next) < r2 {
                // The box binds before the ellipsoid does.
                return Ok(dot(h, &next));
            }
            wl = next;
        }
        for _ in 0..200 {
            let mid = (mu_lo * mu_hi).sqrt();
            let wm = solve_at(mid)?;
            let qm = self.quad(&wm);
            if qm > r2 {
                mu_lo = mid;
            } else {
                mu_hi = mid;
                w = wm;
            }
            if (qm - r2).abs() <= 1e-12 * r2 || mu_hi / mu_lo < 1.0 + 1e-14 {
                break;
            }
        }
        Ok(dot(h, &w))
    }
}

/// Squared radius of a one-dimensional interval with coverage `1 − α`.
pub fn marginal_radius_sq(alpha: f64, unimodal: bool) -> f64 {
    if !unimodal {
        1.0 / alpha
    } else if alpha <= 1.0 / 6.0 {
        4.0 / (9.0 * alpha)
    } else {
        4.0 / (3.0 * alpha + 1.0)
    }
}

struct HRows<'a> {
    h: &'a [Vec<f64>],
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ConstraintRows for HRows<'_> {
    fn len(&self) -> usize {
        self.h.len()
    }
    fn lower(&self, i: usize) -> f64 {
        self.lower[i]
    }
    fn upper(&self, i: usize) -> f64 {
        self.upper[i]
    }
    fn dot(&self, i: usize, x: &[f64]) -> f64 {
        dot(&self.h[i], x)
    }
    fn row(&self, i: usize) -> Vec<f64> {
        self.h[i].clone()
    }
}

/// Full local output for one geography.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalEstimate {
    pub id: String,
    pub eta_hat: Vec<f64>,
    pub sigma_hat: Vec<Vec<f64>>,
    pub projection: LocalProjection,
    pub region: LocalRegion,
    /// Per-component intervals over the joint region.
    pub intervals: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalOptions {
    pub kappa_basis: BasisSpec,
    /// `None` selects the penalty of the variance fit by LOOCV.
    pub kappa_lambda: Option<f64>,
    pub alpha: f64,
    pub unimodal: bool,
}

impl Default for LocalOptions {
    fn default() -> Self {
        Self {
            kappa_basis: BasisSpec::intercept_only(),
            kappa_lambda: None,
            alpha: 0.1,
            unimodal: false,
        }
    }
}

/// Local estimates for every geography.
pub fn local_estimates(
    data: &AggregateDataset,
    nuisance: &NuisanceFit,
    opts: &LocalOptions,
) -> Result<(Vec<LocalEstimate>, ConditionalCovariance)> {
    let cov = fit_kappa(data, nuisance, &opts.kappa_basis, opts.kappa_lambda)?;
    let bounds = data.outcome_bounds();
    let d = data.d();
    let out = data
        .records()
        .par_iter()
        .enumerate()
        .map(|(g, r)| {
            let eta: Vec<f64> = (0..d).map(|j| nuisance.gamma_pure[j][g]).collect();
            let sigma = cov.sigma(&r.z)?;
            let projection = project_local(&eta, &sigma, &r.xbar, r.ybar, bounds)?;
            let region = LocalRegion::new(&projection, &r.xbar, r.ybar, opts.alpha, opts.unimodal, bounds)?;
            let intervals = (0..d)
                .map(|j| {
                    if opts.unimodal {
                        region.marginal_interval(j)
                    } else {
                        region.component_interval(j)
                    }
                })
                .collect::<Result<_>>()?;
            Ok(LocalEstimate {
                id: r.id.clone(),
                eta_hat: eta,
                sigma_hat: linalg::mat_to_rows(sigma.as_ref()),
                projection,
                region,
                intervals,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, cov))
}

/// Writes one row per geography: id, `η̂`, `B̂'`, and interval endpoints.
pub fn write_local_csv<W: Write>(estimates: &[LocalEstimate], group_names: &[String], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string()];
    header.extend(group_names.iter().map(|g| format!("eta_{g}")));
    header.extend(group_names.iter().map(|g| format!("b_{g}")));
    for g in group_names {
        header.push(format!("lower_{g}"));
        header.push(format!("upper_{g}"));
    }
    w.write_record(&header)?;
    for e in estimates {
        let mut row = vec![e.id.clone()];
        row.extend(e.eta_hat.iter().map(f64::to_string));
        row.extend(e.projection.b_hat_prime.iter().map(f64::to_string));
        for iv in &e.intervals {
            row.push(iv[0].to_string());
            row.push(iv[1].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_local_csv(estimates: &[LocalEstimate], group_names: &[String], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_local_csv(estimates, group_names, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sym(rows: &[&[f64]]) -> Mat<f64> {
        linalg::mat_from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn polarization_arithmetic() {
        let s = sym(&[&[1.0, 0.5], &[0.5, 2.0]]);
        let k = |x: &[f64]| dot(x, &mat_vec(s.as_ref(), x));
        assert_eq!(k(&[1.0, 0.0]), 1.0);
        assert_eq!(k(&[0.0, 1.0]), 2.0);
        assert_eq!(k(&[0.5, 0.5]), 1.0);
        assert_eq!(2.0 * (1.0 - 0.25 - 0.5), 0.5);
    }

    #[test]
    fn hyperplane_examples() {
        let (h, b0) = hyperplane_basis(&[0.5, 0.5], 0.4).unwrap();
        assert!((b0[0] - 0.4).abs() < 1e-15 && (b0[1] - 0.4).abs() < 1e-15);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((h[(0, 0)].abs() - s).abs() < 1e-15 && (h[(0, 0)] + h[(1, 0)]).abs() < 1e-15);

        let (h, b0) = hyperplane_basis(&[1.0, 0.0, 0.0], 0.7).unwrap();
        assert_eq!(b0, vec![0.7, 0.0, 0.0]);
        for c in 0..2 {
            assert!(h[(0, c)].abs() < 1e-15);
        }
        assert!(hyperplane_basis(&[0.0, 0.0], 0.1).is_err());
    }

    #[test]
    fn orthogonal_case_matches_closed_form() {
        let xbar = [0.2, 0.3, 0.5];
        let eta = [0.9, 0.1, 0.4];
        let ybar = 0.35;
        let p = project_local(&eta, &Mat::identity(3, 3), &xbar, ybar, None).unwrap();
        let gap = dot(&xbar, &eta) - ybar;
        let nn = dot(&xbar, &xbar);
        for j in 0..3 {
            assert!((p.b_hat[j] - (eta[j] - xbar[j] * gap / nn)).abs() < 1e-14);
        }
    }

    #[test]
    fn two_dimensional_geometry() {
        let p = project_local(&[0.5, 0.5], &Mat::identity(2, 2), &[0.5, 0.5], 0.1, Some([0.0, 1.0])).unwrap();
        for j in 0..2 {
            assert!((p.b_hat[j] - 0.1).abs() < 1e-14);
            assert!((p.b_hat_prime[j] - 0.1).abs() < 1e-14);
        }
    }

    #[test]
    fn bound_projection_is_feasible() {
        let s = sym(&[&[1.0, 0.3, 0.0], &[0.3, 0.5, 0.1], &[0.0, 0.1, 2.0]]);
        let xbar = [0.6, 0.3, 0.1];
        let p = project_local(&[1.4, -0.2, 0.5], &s, &xbar, 0.7, Some([0.0, 1.0])).unwrap();
        assert!((dot(&p.b_hat, &xbar) - 0.7).abs() < 1e-10);
        assert!((dot(&p.b_hat_prime, &xbar) - 0.7).abs() < 1e-8);
        assert!(p.b_hat_prime.iter().all(|&b| (-1e-9..=1.0 + 1e-9).contains(&b)));
    }

    #[test]
    fn segment_endpoints_in_two_dimensions() {
        // Line b = (0.4, 0.4) + t(1, −1)/√2 with Σ = I: the metric is 1, so
        // the region is |t| ≤ √(1/α), clipped to the unit square.
        let xbar = [0.5, 0.5];
        let p = project_local(&[0.4, 0.4], &Mat::identity(2, 2), &xbar, 0.4, None).unwrap();
        let alpha = 0.5;
        let r = (1.0 / alpha as f64).sqrt() / std::f64::consts::SQRT_2;
        let free = LocalRegion::new(&p, &xbar, 0.4, alpha, false, None).unwrap();
        let iv = free.component_interval(0).unwrap();
        assert!((iv[0] - (0.4 - r)).abs() < 1e-12 && (iv[1] - (0.4 + r)).abs() < 1e-12);
        let boxed = LocalRegion::new(&p, &xbar, 0.4, alpha, false, Some([0.0, 1.0])).unwrap();
        let iv = boxed.component_interval(0).unwrap();
        // b₁ ≥ 0 and b₂ = 0.8 − b₁ ≤ 1 bind before the ellipsoid.
        assert!(iv[0].abs() < 1e-9 && (iv[1] - 0.8).abs() < 1e-9);
        let tight = project_local(&[0.4, 0.4], &(Mat::<f64>::identity(2, 2) * 0.1), &xbar, 0.4, None).unwrap();
        let small = LocalRegion::new(&tight, &xbar, 0.4, alpha, false, Some([0.0, 1.0])).unwrap();
        let r = (0.1 / alpha).sqrt() / std::f64::consts::SQRT_2;
        let iv = small.component_interval(1).unwrap();
        assert!((iv[0] - (0.4 - r)).abs() < 1e-8 && (iv[1] - (0.4 + r)).abs() < 1e-8);
    }

    #[test]
    fn radius_is_monotone_in_alpha() {
        let xbar = [0.3, 0.3, 0.4];
        let p = project_local(&[0.5, 0.5, 0.5], &Mat::identity(3, 3), &xbar, 0.5, None).unwrap();
        let widths: Vec<f64> = [0.9, 0.5, 0.1, 0.01]
            .iter()
            .map(|&a| {
                let r = LocalRegion::new(&p, &xbar, 0.5, a, false, None).unwrap();
                let iv = r.component_interval(0).unwrap();
                iv[1] - iv[0]
            })
            .collect();
        assert!(widths.windows(2).all(|w| w[0] < w[1]));
        let near_one = LocalRegion::new(&p, &xbar, 0.5, 1.0 - 1e-12, false, None).unwrap();
        assert!((near_one.radius_sq - 2.0).abs() < 1e-10);
        assert!(LocalRegion::new(&p, &xbar, 0.5, 1.0, false, None).is_err());
    }

    #[test]
    fn unimodal_radius_shrinks_width_by_two_thirds() {
        let a = 0.05;
        assert!(((marginal_radius_sq(a, true) / marginal_radius_sq(a, false)).sqrt() - 2.0 / 3.0).abs() < 1e-15);
        let x = 1.0 / 6.0;
        assert!((marginal_radius_sq(x, true) - 4.0 / (3.0 * x + 1.0)).abs() < 1e-12);
    }

    fn random_spd(rng: &mut impl rand::Rng, d: usize) -> Mat<f64> {
        let a = Mat::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let mut s = linalg::matmul_new(a.as_ref(), a.transpose());
        for i in 0..d {
            s[(i, i)] += 0.1;
        }
        s
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn projector_properties(seed in any::<u64>(), d in 2usize..7) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<f64> = (0..d).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let xbar: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let ybar = rng.gen_range(0.0..1.0);
            let (h, b0) = hyperplane_basis(&xbar, ybar).unwrap();
            let hth = linalg::matmul_new(h.transpose(), h.as_ref());
            for a in 0..d - 1 {
                prop_assert!(dot(&linalg::col_to_vec(h.as_ref(), a), &xbar).abs() <= 1e-12);
                for c in 0..d - 1 {
                    let want = if a == c { 1.0 } else { 0.0 };
                    prop_assert!((hth[(a, c)] - want).abs() <= 1e-12);
                }
            }
            for _ in 0..100 {
                let w: Vec<f64> = (0..d - 1).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let b: Vec<f64> = b0.iter().zip(mat_vec(h.as_ref(), &w)).map(|(a, c)| a + c).collect();
                prop_assert!((dot(&b, &xbar) - ybar).abs() <= 1e-12);
            }
            let sigma = random_spd(&mut rng, d);
            let eta: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..2.0)).collect();
            let p = project_local(&eta, &sigma, &xbar, ybar, Some([0.0, 1.0])).unwrap();
            prop_assert!((dot(&p.b_hat, &xbar) - ybar).abs() <= 1e-10);
            prop_assert!((dot(&p.b_hat_prime, &xbar) - ybar).abs() <= 1e-8);
            prop_assert!(p.b_hat_prime.iter().all(|&b| (-1e-9..=1.0 + 1e-9).contains(&b)));
            let pi = linalg::mat_from_rows(&p.pi_hat);
            let pp = linalg::matmul_new(pi.as_ref(), pi.as_ref());
            for a in 0..d {
                for c in 0..d {
                    prop_assert!((pp[(a, c)] - pi[(a, c)]).abs() <= 1e-10);
                }
            }
            // Π fixes the homogeneous hyperplane.
            let w: Vec<f64> = (0..d - 1).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v = mat_vec(h.as_ref(), &w);
            let pv = mat_vec(pi.as_ref(), &v);
            for a in 0..d {
                prop_assert!((pv[a] - v[a]).abs() <= 1e-10);
            }
            // η already on H is left alone.
            let on_h: Vec<f64> = b0.iter().zip(&v).map(|(a, c)| a + c).collect();
            let q = project_local(&on_h, &sigma, &xbar, ybar, None).unwrap();
            for a in 0..d {
                prop_assert!((q.b_hat[a] - on_h[a]).abs() <= 1e-10);
            }
            // Interval endpoints lie on the region boundary or the box.
            let region = LocalRegion::new(&p, &xbar, ybar, 0.2, false, Some([0.0, 1.0])).unwrap();
            let iv = region.component_interval(0).unwrap();
            prop_assert!(iv[0] <= p.b_hat_prime[0] + 1e-12 && iv[1] >= p.b_hat_prime[0] - 1e-12);
            prop_assert!(region.contains(&p.b_hat_prime));
        }

        #[test]
        fn polarization_is_exact(seed in any::<u64>(), d in 1usize..6) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let basis = FittedBasis::with_scaling(&BasisSpec::cosine(3), vec![crate::sieve::ScalingMap { min: 0.0, max: 1.0 }], vec![false]).unwrap();
            let jj = basis.len();
            let theta: Vec<f64> = (0..vech_len(d) * jj).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cov = ConditionalCovariance { basis, d, theta, lambda: 0.0, loocv: None };
            let z = [rng.gen_range(0.0..1.0)];
            let s = cov.sigma_raw(&z);
            for _ in 0..5 {
                let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let direct = cov.kappa(&x, &z);
                let via = dot(&x, &mat_vec(s.as_ref(), &x));
                prop_assert!((direct - via).abs() <= 1e-12 * (1.0 + direct.abs()));
            }
        }
    }
}
