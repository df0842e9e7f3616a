//! The debiased estimator of the group means, its score covariance,
//! contrasts, and the Goodman regression baseline.
//!
//! For group `j` the score of geography `g` is
//!
//! ```text
//! ψ_gj = γ̂(e_j, z_g) u_gj + w_g α̂_j(x̄_g, z_g) (ȳ_g − γ̂(x̄_g, z_g))
//! ```
//!
//! where `w` are the (mean-one) regression loss weights. `β̂_j` is the mean
//! of the scores and its covariance is their sample covariance over `m`.
//! Nuisances are fit on the full sample, without cross-fitting.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{bnd_diagnostic, compute_all_u, AggregateDataset, DEFAULT_BND_THRESHOLD};
use crate::error::{Error, Result};
use crate::linalg::{self, normal_critical};
use crate::ridge::{self, default_lambda_grid, LoocvPath, RidgeFit, SvdCache};
use crate::riesz::{self, RieszFit};
use crate::sieve::{BasisSpec, FittedBasis, SieveDesign};

/// How the penalty is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum LambdaChoice {
    /// Closed-form LOOCV of the outcome regression over a grid.
    Loocv { grid: Vec<f64> },
    /// A fixed penalty on the empirical-mean scale.
    Fixed { lambda: f64 },
}

impl Default for LambdaChoice {
    fn default() -> Self {
        Self::Loocv {
            grid: default_lambda_grid(),
        }
    }
}

/// Observation weighting of the nuisance regressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Uniform,
    /// Weight every geography by its population size.
    Population,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    pub basis: BasisSpec,
    #[serde(default)]
    pub lambda: LambdaChoice,
    #[serde(default)]
    pub weighting: Weighting,
    /// Extra per-geography weights multiplying the regression loss.
    #[serde(default)]
    pub precision_weights: Option<Vec<f64>>,
    /// Constrain `γ̂(e_j, z)` to the dataset's outcome bounds, if declared.
    #[serde(default = "default_true")]
    pub bounded: bool,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Compute leave-one-out representer values.
    #[serde(default)]
    pub compute_loo: bool,
    #[serde(default = "default_bnd")]
    pub bnd_threshold: f64,
}

fn default_true() -> bool {
    true
}

fn default_level() -> f64 {
    0.95
}

fn default_bnd() -> f64 {
    DEFAULT_BND_THRESHOLD
}

impl EstimateOptions {
    pub fn new(basis: BasisSpec) -> Self {
        Self {
            basis,
            lambda: LambdaChoice::default(),
            weighting: Weighting::Uniform,
            precision_weights: None,
            bounded: true,
            level: default_level(),
            compute_loo: false,
            bnd_threshold: DEFAULT_BND_THRESHOLD,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = LambdaChoice::Fixed { lambda };
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidArgument(format!("level must lie in (0, 1), got {}", self.level)));
        }
        if let LambdaChoice::Fixed { lambda } = self.lambda {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::InvalidArgument(format!("lambda must be nonnegative, got {lambda}")));
            }
        }
        Ok(())
    }
}

/// Normalized regression loss weights and their square roots.
pub fn loss_weights(data: &AggregateDataset, opts: &EstimateOptions) -> Result<Vec<f64>> {
    let m = data.m();
    let mut w = match opts.weighting {
        Weighting::Uniform => vec![1.0; m],
        Weighting::Population => data.sizes(),
    };
    if let Some(p) = &opts.precision_weights {
        if p.len() != m {
            return Err(Error::Dimension(format!("{} precision weights for {m} records", p.len())));
        }
        if p.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("precision weights must be positive and finite".into()));
        }
        w.iter_mut().zip(p).for_each(|(a, b)| *a *= b);
    }
    let mean = w.iter().sum::<f64>() / m as f64;
    Ok(w.into_iter().map(|v| v / mean).collect())
}

/// Fitted nuisances sharing one SVD.
#[derive(Debug, Clone)]
pub struct NuisanceFit {
    pub sieve: SieveDesign,
    /// SVD of the row-scaled design `diag(√w) X`.
    pub svd: SvdCache,
    pub lambda: f64,
    pub loocv: Option<LoocvPath>,
    pub gamma: RidgeFit,
    /// Whether the bound-constrained program changed the fit.
    pub gamma_constrained: bool,
    /// `γ̂(x̄_g, z_g)`.
    pub gamma_fitted: Vec<f64>,
    /// `γ̂(e_j, z_g)`, indexed `[j][g]`.
    pub gamma_pure: Vec<Vec<f64>>,
    pub riesz: RieszFit,
    /// Size weights, indexed `[j][g]`.
    pub u: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub sqrt_w: Vec<f64>,
}

/// Fits the outcome regression and every representer.
pub fn fit_nuisance(data: &AggregateDataset, opts: &EstimateOptions) -> Result<NuisanceFit> {
    let basis = FittedBasis::fit(&opts.basis, data)?;
    fit_nuisance_with_basis(data, basis, opts)
}

/// As [`fit_nuisance`] with an already fitted basis.
pub fn fit_nuisance_with_basis(data: &AggregateDataset, basis: FittedBasis, opts: &EstimateOptions) -> Result<NuisanceFit> {
    opts.validate()?;
    let start = Instant::now();
    let u: Vec<Vec<f64>> = compute_all_u(data)?.into_iter().map(|w| w.values).collect();
    let weights = loss_weights(data, opts)?;
    let sqrt_w: Vec<f64> = weights.iter().map(|v| v.sqrt()).collect();
    let sieve = SieveDesign::from_basis(basis, data);
    let svd = {
        let x = sieve.scaled_design(&sqrt_w);
        SvdCache::new(x.as_ref())?
    };
    log::info!(
        "design {}x{} has rank {} ({:.2?})",
        sieve.m(),
        sieve.ncols(),
        svd.rank(),
        start.elapsed()
    );
    let y: Vec<f64> = data.ybar().iter().zip(&sqrt_w).map(|(a, s)| a * s).collect();
    let (lambda, loocv) = match &opts.lambda {
        LambdaChoice::Fixed { lambda } => (*lambda, None),
        LambdaChoice::Loocv { grid } => {
            let path = ridge::loocv_path(&svd, &y, grid)?;
            (path.best_lambda, Some(path))
        }
    };
    let mut gamma = ridge::ridge_solve(&svd, &y, lambda)?;
    let mut gamma_constrained = false;
    if let (true, Some(bounds)) = (opts.bounded, data.outcome_bounds()) {
        let bounded = ridge::ridge_solve_bounded(&svd, &sieve, &y, lambda, bounds)?;
        gamma_constrained = bounded.hat_diag.is_none();
        gamma = bounded;
    }
    let gamma_fitted = sieve.eval_design(&gamma.theta);
    let gamma_pure: Vec<Vec<f64>> = (0..sieve.d()).map(|j| sieve.eval_pure(&gamma.theta, j)).collect();
    let riesz = riesz::fit_all(&svd, &sieve, &u, lambda, &sqrt_w, opts.compute_loo)?;
    log::info!("nuisances fit with lambda = {lambda:e} ({:.2?})", start.elapsed());
    Ok(NuisanceFit {
        sieve,
        svd,
        lambda,
        loocv,
        gamma,
        gamma_constrained,
        gamma_fitted,
        gamma_pure,
        riesz,
        u,
        weights,
        sqrt_w,
    })
}

/// Score matrix `ψ` (indexed `[g][j]`) from nuisance values.
///
/// `gamma_pure[j][g] = γ(e_j, z_g)`, `gamma_fitted[g] = γ(x̄_g, z_g)`,
/// `alpha[j][g] = α_j(x̄_g, z_g)`.
pub fn dml_scores(
    ybar: &[f64],
    gamma_fitted: &[f64],
    gamma_pure: &[Vec<f64>],
    alpha: &[Vec<f64>],
    u: &[Vec<f64>],
    weights: &[f64],
) -> Vec<Vec<f64>> {
    let d = gamma_pure.len();
    (0..ybar.len())
        .map(|g| {
            let r = ybar[g] - gamma_fitted[g];
            (0..d)
                .map(|j| gamma_pure[j][g] * u[j][g] + weights[g] * alpha[j][g] * r)
                .collect()
        })
        .collect()
}

/// Column means of a score matrix.
pub fn score_means(scores: &[Vec<f64>]) -> Vec<f64> {
    let m = scores.len() as f64;
    let d = scores.first().map_or(0, Vec::len);
    (0..d).map(|j| scores.iter().map(|r| r[j]).sum::<f64>() / m).collect()
}

/// Sample covariance of the scores (denominator `m − 1`) divided by `m`.
pub fn score_vcov(scores: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = scores.len();
    let d = scores.first().map_or(0, Vec::len);
    let mean = score_means(scores);
    let mut v = vec![vec![0.0; d]; d];
    for row in scores {
        for a in 0..d {
            for b in 0..=a {
                v[a][b] += (row[a] - mean[a]) * (row[b] - mean[b]);
            }
        }
    }
    let denom = (m as f64 - 1.0) * m as f64;
    for a in 0..d {
        for b in 0..=a {
            v[a][b] /= denom;
            v[b][a] = v[a][b];
        }
    }
    v
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Selected penalty (empirical-mean scale).
    pub lambda: f64,
    pub loocv_error: Option<f64>,
    pub rank: usize,
    pub n_coefficients: usize,
    /// `E_m[w α̂_j²]` per group; values far above one signal weak overlap.
    pub alpha_second_moment: Vec<f64>,
    /// Raw `ν̂_j` per group (may be negative under penalization).
    pub nu_hat: Vec<f64>,
    /// Largest `u_gj` per group.
    pub max_u: Vec<f64>,
    /// Groups whose largest `u_gj` exceeds the threshold.
    pub bnd_flagged: Vec<usize>,
    pub bnd_threshold: f64,
    pub gamma_constrained: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateResult {
    pub group_names: Vec<String>,
    pub beta: Vec<f64>,
    /// `β̂` clipped to the declared outcome bounds. A convenience only:
    /// inference refers to the raw `beta`.
    pub beta_clipped: Option<Vec<f64>>,
    pub vcov: Vec<Vec<f64>>,
    pub std_errors: Vec<f64>,
    pub level: f64,
    pub ci: Vec<[f64; 2]>,
    pub diagnostics: Diagnostics,
    /// Per-geography scores `ψ`, indexed `[g][j]`.
    #[serde(skip)]
    pub scores: Vec<Vec<f64>>,
}

impl EstimateResult {
    /// Confidence interval at another level from the same covariance.
    pub fn ci_at(&self, level: f64) -> Vec<[f64; 2]> {
        let z = normal_critical(level);
        self.beta
            .iter()
            .zip(&self.std_errors)
            .map(|(b, s)| [b - z * s, b + z * s])
            .collect()
    }
}

/// Runs the full pipeline.
pub fn estimate(data: &AggregateDataset, opts: &EstimateOptions) -> Result<EstimateResult> {
    Ok(estimate_full(data, opts)?.0)
}

/// Runs the full pipeline and also returns the nuisances.
pub fn estimate_full(data: &AggregateDataset, opts: &EstimateOptions) -> Result<(EstimateResult, NuisanceFit)> {
    let fit = fit_nuisance(data, opts)?;
    let result = estimate_from_nuisance(data, &fit, opts)?;
    Ok((result, fit))
}

/// Assembles the estimate from fitted nuisances.
pub fn estimate_from_nuisance(data: &AggregateDataset, fit: &NuisanceFit, opts: &EstimateOptions) -> Result<EstimateResult> {
    opts.validate()?;
    let d = data.d();
    let alpha: Vec<Vec<f64>> = (0..d).map(|j| fit.riesz.alpha(j)).collect();
    let scores = dml_scores(&data.ybar(), &fit.gamma_fitted, &fit.gamma_pure, &alpha, &fit.u, &fit.weights);
    let beta = score_means(&scores);
    let vcov = score_vcov(&scores);
    let std_errors: Vec<f64> = (0..d).map(|j| vcov[j][j].max(0.0).sqrt()).collect();
    let z = normal_critical(opts.level);
    let ci = beta.iter().zip(&std_errors).map(|(b, s)| [b - z * s, b + z * s]).collect();
    let beta_clipped = data
        .outcome_bounds()
        .map(|[lo, hi]| beta.iter().map(|b| b.clamp(lo, hi)).collect());
    let max_u: Vec<f64> = bnd_diagnostic(data).into_iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    let bnd_flagged: Vec<usize> = (0..d).filter(|&j| max_u[j] > opts.bnd_threshold).collect();
    for &j in &bnd_flagged {
        log::warn!(
            "group {} has max u = {:.1} above {}: a few geographies dominate its estimate",
            data.group_names()[j],
            max_u[j],
            opts.bnd_threshold
        );
    }
    let loocv_error = match &fit.loocv {
        Some(p) => p.errors[p.best_index],
        None => fit.gamma.loocv_error,
    };
    Ok(EstimateResult {
        group_names: data.group_names().to_vec(),
        beta,
        beta_clipped,
        vcov,
        std_errors,
        level: opts.level,
        ci,
        diagnostics: Diagnostics {
            lambda: fit.lambda,
            loocv_error,
            rank: fit.svd.rank(),
            n_coefficients: fit.sieve.ncols(),
            alpha_second_moment: fit.riesz.second_moment.clone(),
            nu_hat: fit.riesz.nu_hat.clone(),
            max_u,
            bnd_flagged,
            bnd_threshold: opts.bnd_threshold,
            gamma_constrained: fit.gamma_constrained,
        },
        scores,
    })
}

/// A linear contrast `cᵀβ` with its standard error and interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContrastEstimate {
    pub weights: Vec<f64>,
    pub estimate: f64,
    pub std_error: f64,
    pub ci: [f64; 2],
}

pub fn contrast(result: &EstimateResult, c: &[f64]) -> Result<ContrastEstimate> {
    let d = result.beta.len();
    if c.len() != d {
        return Err(Error::Dimension(format!("contrast has {} weights for {d} groups", c.len())));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("contrast weights must be finite".into()));
    }
    let estimate = linalg::dot(c, &result.beta);
    let var: f64 = (0..d)
        .map(|a| (0..d).map(|b| c[a] * result.vcov[a][b] * c[b]).sum::<f64>())
        .sum();
    let std_error = var.max(0.0).sqrt();
    let z = normal_critical(result.level);
    Ok(ContrastEstimate {
        weights: c.to_vec(),
        estimate,
        std_error,
        ci: [estimate - z * std_error, estimate + z * std_error],
    })
}

/// Goodman's ecological regression: no-intercept least squares of `ȳ` on
/// `x̄`, optionally weighted by population size, with HC1 sandwich
/// standard errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoodmanFit {
    pub group_names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub vcov: Vec<Vec<f64>>,
    pub std_errors: Vec<f64>,
    pub weighted: bool,
}

impl GoodmanFit {
    pub fn ci(&self, level: f64) -> Vec<[f64; 2]> {
        let z = normal_critical(level);
        self.coefficients
            .iter()
            .zip(&self.std_errors)
            .map(|(b, s)| [b - z * s, b + z * s])
            .collect()
    }
}

pub fn goodman(data: &AggregateDataset, weighted: bool) -> Result<GoodmanFit> {
    let m = data.m();
    let d = data.d();
    if d > m {
        return Err(Error::InvalidData(format!("{d} groups exceed {m} records")));
    }
    let w: Vec<f64> = if weighted { data.sizes() } else { vec![1.0; m] };
    let x = data.xbar_matrix();
    let y = data.ybar();
    // XᵀWX and XᵀWy.
    let xtwx = faer::Mat::from_fn(d, d, |a, b| (0..m).map(|g| w[g] * x[(g, a)] * x[(g, b)]).sum::<f64>());
    let xtwy: Vec<f64> = (0..d).map(|a| (0..m).map(|g| w[g] * x[(g, a)] * y[g]).sum()).collect();
    let svd = SvdCache::new(xtwx.as_ref())?;
    if !svd.full_column_rank() {
        return Err(Error::RankDeficient { rank: svd.rank(), cols: d });
    }
    let inv = linalg::inverse_spd(xtwx.as_ref())?;
    let coefficients = linalg::mat_vec(inv.as_ref(), &xtwy);
    let resid: Vec<f64> = (0..m)
        .map(|g| y[g] - (0..d).map(|a| x[(g, a)] * coefficients[a]).sum::<f64>())
        .collect();
    let meat = faer::Mat::from_fn(d, d, |a, b| {
        (0..m)
            .map(|g| (w[g] * resid[g]).powi(2) * x[(g, a)] * x[(g, b)])
            .sum::<f64>()
    });
    let dof = if m > d { m as f64 / (m - d) as f64 } else { 1.0 };
    let sandwich = linalg::matmul_new(linalg::matmul_new(inv.as_ref(), meat.as_ref()).as_ref(), inv.as_ref());
    let vcov: Vec<Vec<f64>> = (0..d).map(|a| (0..d).map(|b| dof * sandwich[(a, b)]).collect()).collect();
    let std_errors = (0..d).map(|a| vcov[a][a].max(0.0).sqrt()).collect();
    Ok(GoodmanFit {
        group_names: data.group_names().to_vec(),
        coefficients,
        vcov,
        std_errors,
        weighted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::GeographyRecord;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_data(rng: &mut ChaCha8Rng, m: usize, d: usize, p: usize, sized: bool) -> AggregateDataset {
        let records = (0..m)
            .map(|_| {
                let raw: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                let mut xbar: Vec<f64> = raw.iter().map(|v| v / s).collect();
                let rest: f64 = xbar[1..].iter().sum();
                xbar[0] = 1.0 - rest;
                GeographyRecord {
                    id: String::new(),
                    ybar: rng.gen_range(0.0..1.0),
                    xbar,
                    z: (0..p).map(|_| rng.gen_range(0.0..1.0)).collect(),
                    n: if sized { rng.gen_range(0.5..3.0) } else { 1.0 },
                }
            })
            .collect();
        AggregateDataset::new(
            records,
            (0..d).map(|j| format!("x{j}")).collect(),
            (0..p).map(|k| format!("z{k}")).collect(),
            None,
        )
        .unwrap()
    }

    fn constant_b_data() -> AggregateDataset {
        let shares = [0.1, 0.35, 0.5, 0.8, 0.95, 0.6];
        let records = shares
            .iter()
            .map(|&a| GeographyRecord {
                id: String::new(),
                ybar: 0.3 * a + 0.7 * (1.0 - a),
                xbar: vec![a, 1.0 - a],
                z: vec![],
                n: 1.0,
            })
            .collect();
        AggregateDataset::new(records, vec!["a".into(), "b".into()], vec![], None).unwrap()
    }

    #[test]
    fn constant_b_is_recovered_exactly() {
        let data = constant_b_data();
        let opts = EstimateOptions::new(BasisSpec::intercept_only()).with_lambda(0.0);
        let (res, fit) = estimate_full(&data, &opts).unwrap();
        assert!((res.beta[0] - 0.3).abs() < 1e-10 && (res.beta[1] - 0.7).abs() < 1e-10);
        // both correction terms vanish
        for g in 0..data.m() {
            assert!((data.ybar()[g] - fit.gamma_fitted[g]).abs() < 1e-12);
        }
        let c = contrast(&res, &[1.0, -1.0]).unwrap();
        assert!((c.estimate + 0.4).abs() < 1e-10);
        // With zero residuals the scores reduce to 0.3 u_g1 − 0.7 u_g2, so
        // the standard error is that of the size-weight spread alone.
        let u = compute_all_u(&data).unwrap();
        let diff: Vec<f64> = (0..data.m()).map(|g| 0.3 * u[0].values[g] - 0.7 * u[1].values[g]).collect();
        let mean = diff.iter().sum::<f64>() / 6.0;
        let var = diff.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0 / 6.0;
        assert!((c.std_error - var.sqrt()).abs() < 1e-10);
        let zero = contrast(&res, &[0.0, 0.0]).unwrap();
        assert_eq!((zero.estimate, zero.std_error), (0.0, 0.0));
        let e0 = contrast(&res, &[1.0, 0.0]).unwrap();
        assert_eq!(e0.estimate, res.beta[0]);
        assert_eq!(e0.ci, res.ci[0]);
        let gm = goodman(&data, false).unwrap();
        assert!((gm.coefficients[0] - 0.3).abs() < 1e-12 && (gm.coefficients[1] - 0.7).abs() < 1e-12);
    }

    /// OLS of ȳ on x̄ through the normal equations.
    fn ols(data: &AggregateDataset, w: &[f64]) -> Vec<f64> {
        let x = data.xbar_matrix();
        let y = data.ybar();
        let d = data.d();
        let a = faer::Mat::from_fn(d, d, |i, j| (0..data.m()).map(|g| w[g] * x[(g, i)] * x[(g, j)]).sum::<f64>());
        let b = faer::Mat::from_fn(d, 1, |i, _| (0..data.m()).map(|g| w[g] * x[(g, i)] * y[g]).sum::<f64>());
        let s = linalg::solve_general(a.as_ref(), b.as_ref());
        (0..d).map(|i| s[(i, 0)]).collect()
    }

    #[test]
    fn intercept_only_equals_goodman() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for sized in [false, true] {
            let data = random_data(&mut rng, 40, 3, 0, sized);
            let mut opts = EstimateOptions::new(BasisSpec::intercept_only()).with_lambda(0.0);
            let w = if sized {
                opts.weighting = Weighting::Population;
                data.sizes()
            } else {
                vec![1.0; 40]
            };
            let res = estimate(&data, &opts).unwrap();
            let oracle = ols(&data, &w);
            let gm = goodman(&data, sized).unwrap();
            for j in 0..3 {
                assert!((res.beta[j] - oracle[j]).abs() < 1e-8);
                assert!((gm.coefficients[j] - oracle[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn weighted_goodman_differs_when_b_tracks_size() {
        let rows = [(0.2, 1.0, 0.1), (0.5, 4.0, 0.6), (0.7, 2.0, 0.3), (0.9, 8.0, 0.8)];
        let records = rows
            .iter()
            .map(|&(a, n, b1)| GeographyRecord {
                id: String::new(),
                ybar: b1 * a + 0.5 * (1.0 - a),
                xbar: vec![a, 1.0 - a],
                z: vec![],
                n,
            })
            .collect();
        let data = AggregateDataset::new(records, vec!["a".into(), "b".into()], vec![], None).unwrap();
        let uw = goodman(&data, false).unwrap();
        let ww = goodman(&data, true).unwrap();
        let oracle_w = ols(&data, &data.sizes());
        for j in 0..2 {
            assert!((ww.coefficients[j] - oracle_w[j]).abs() < 1e-12);
        }
        assert!((uw.coefficients[0] - ww.coefficients[0]).abs() > 1e-3);
    }

    #[test]
    fn scores_average_to_beta_and_vcov_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let data = random_data(&mut rng, 60, 3, 2, true);
        let opts = EstimateOptions::new(BasisSpec::cosine(4));
        let res = estimate(&data, &opts).unwrap();
        let means = score_means(&res.scores);
        assert_eq!(means, res.beta);
        let v = faer::Mat::from_fn(3, 3, |a, b| res.vcov[a][b]);
        let (vals, _) = linalg::symmetric_eigen(v.as_ref()).unwrap();
        assert!(vals[0] >= -1e-10);
        let z = normal_critical(0.95);
        for j in 0..3 {
            assert!((res.ci[j][1] - res.beta[j] - z * res.vcov[j][j].sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn bounded_outcome_reports_clipped_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let data = random_data(&mut rng, 50, 2, 1, false).with_bounds(Some([0.0, 1.0])).unwrap();
        let res = estimate(&data, &EstimateOptions::new(BasisSpec::cosine(3))).unwrap();
        let clipped = res.beta_clipped.unwrap();
        assert!(clipped.iter().all(|b| (0.0..=1.0).contains(b)));
    }

    #[test]
    fn neyman_orthogonality_directional_derivatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let data = random_data(&mut rng, 40, 2, 1, true);
        let opts = EstimateOptions::new(BasisSpec::cosine(3)).with_lambda(0.0);
        let fit = fit_nuisance(&data, &opts).unwrap();
        let y = data.ybar();
        let s = &fit.sieve;
        let design = s.design();
        let eval = |theta: &[f64], zetas: &[Vec<f64>]| -> Vec<f64> {
            let fitted = s.eval_design(theta);
            let pure: Vec<Vec<f64>> = (0..2).map(|j| s.eval_pure(theta, j)).collect();
            let alpha: Vec<Vec<f64>> = zetas.iter().map(|z| linalg::mat_vec(design.as_ref(), z)).collect();
            score_means(&dml_scores(&y, &fitted, &pure, &alpha, &fit.u, &fit.weights))
        };
        let base = eval(&fit.gamma.theta, &fit.riesz.zeta);
        let eps = 1e-6;
        for _ in 0..10 {
            let v: Vec<f64> = (0..s.ncols()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let theta: Vec<f64> = fit.gamma.theta.iter().zip(&v).map(|(a, b)| a + eps * b).collect();
            let moved = eval(&theta, &fit.riesz.zeta);
            let zetas: Vec<Vec<f64>> = fit
                .riesz
                .zeta
                .iter()
                .map(|z| z.iter().zip(&v).map(|(a, b)| a + eps * b).collect())
                .collect();
            let moved_z = eval(&fit.gamma.theta, &zetas);
            for j in 0..2 {
                assert!(((moved[j] - base[j]) / eps).abs() <= 1e-6);
                assert!(((moved_z[j] - base[j]) / eps).abs() <= 1e-6);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn permutation_invariance(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = random_data(&mut rng, 30, 2, 2, true);
            let mut idx: Vec<usize> = (0..30).collect();
            use rand::seq::SliceRandom;
            idx.shuffle(&mut rng);
            let shuffled = data.select(&idx).unwrap();
            let opts = EstimateOptions::new(BasisSpec::cosine(4));
            let a = estimate(&data, &opts).unwrap();
            let b = estimate(&shuffled, &opts).unwrap();
            for j in 0..2 {
                prop_assert!((a.beta[j] - b.beta[j]).abs() <= 1e-10);
            }
        }

        #[test]
        fn scale_equivariance(seed in any::<u64>(), c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = random_data(&mut rng, 30, 2, 1, false);
            let scaled = data.with_outcomes(&data.ybar().iter().map(|y| c * y).collect::<Vec<_>>()).unwrap();
            let opts = EstimateOptions::new(BasisSpec::cosine(3)).with_lambda(1e-3);
            let a = estimate(&data, &opts).unwrap();
            let b = estimate(&scaled, &opts).unwrap();
            for j in 0..2 {
                prop_assert!((c * a.beta[j] - b.beta[j]).abs() <= 1e-10 * (1.0 + b.beta[j].abs()));
                prop_assert!((c * a.std_errors[j] - b.std_errors[j]).abs() <= 1e-10 * (1.0 + b.std_errors[j]));
                for e in 0..2 {
                    prop_assert!((c * a.ci[j][e] - b.ci[j][e]).abs() <= 1e-10 * (1.0 + b.ci[j][e].abs()));
                }
            }
        }
    }
}
