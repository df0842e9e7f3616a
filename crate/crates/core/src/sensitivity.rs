//! Bias bounds for violations of coarsening at random.
//!
//! An omitted confounder changes a target `θ = cᵀβ` by at most
//! `ρ · S · C_γ · C_α`, where `S = σ̂ √ν̂` is estimable, `C_γ² = R²` is the
//! share of residual outcome variance the confounder would explain, and
//! `C_α² = (1 − R²_α)/R²_α` measures how much it would sharpen the
//! representer. Robustness values, contour tables, and covariate
//! benchmarks help calibrate those parameters.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::AggregateDataset;
use crate::dml::{self, EstimateOptions, EstimateResult, LambdaChoice, NuisanceFit};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::riesz::{self, RieszTarget};

/// The bias bound `ρ · σ̂ · √max(ν̂, 0) · C_γ · C_α`.
pub fn bias_bound(sigma_hat: f64, nu_hat: f64, rho: f64, c_gamma: f64, c_alpha: f64) -> Result<f64> {
    if c_gamma < 0.0 || c_alpha < 0.0 || sigma_hat < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sensitivity parameters must be nonnegative (sigma {sigma_hat}, C_gamma {c_gamma}, C_alpha {c_alpha})"
        )));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("rho must lie in [0, 1], got {rho}")));
    }
    Ok(rho * sigma_hat * nu_hat.max(0.0).sqrt() * c_gamma * c_alpha)
}

/// Bias bound when both sensitivity `R²` parameters equal `r2`:
/// `s · r2 / √(1 − r2)`.
pub fn equal_r2_bound(s: f64, r2: f64) -> f64 {
    s * r2 / (1.0 - r2).sqrt()
}

/// The largest common value of the two `R²` parameters keeping the bias
/// bound below `delta`, for bound scale `s = ρ S`.
///
/// Solves `s² RV² + δ² RV − δ² = 0` on `(0, 1)`. Returns 1 when `s = 0`.
pub fn robustness_value(s: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
    }
    if s < 0.0 || !s.is_finite() {
        return Err(Error::InvalidArgument(format!("bound scale must be nonnegative, got {s}")));
    }
    if s == 0.0 {
        return Ok(1.0);
    }
    let d2 = delta * delta;
    Ok(2.0 * d2 / (d2 + (d2 * d2 + 4.0 * s * s * d2).sqrt()))
}

/// What the sensitivity analysis is about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityTarget {
    Group(usize),
    Contrast(Vec<f64>),
}

impl SensitivityTarget {
    pub fn weights(&self, d: usize) -> Result<Vec<f64>> {
        match self {
            Self::Group(j) if *j < d => {
                let mut c = vec![0.0; d];
                c[*j] = 1.0;
                Ok(c)
            }
            Self::Group(j) => Err(Error::InvalidArgument(format!("group {j} out of range for d = {d}"))),
            Self::Contrast(c) if c.len() == d => Ok(c.clone()),
            Self::Contrast(c) => Err(Error::Dimension(format!("contrast has {} weights for {d} groups", c.len()))),
        }
    }
}

/// Benchmark values for one observed covariate treated as if omitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Benchmark {
    pub covariate: String,
    /// Partial `R²` of the covariate in the outcome regression.
    pub r2_gamma: f64,
    pub c_gamma: f64,
    /// `C_α²`, the relative gain in the representer's second moment.
    pub c_alpha_sq: f64,
    pub c_alpha: f64,
    /// Correlation of the changes in `γ̂` and `α̂`.
    pub rho: f64,
    /// Target estimate with the covariate minus without it.
    pub delta_estimate: f64,
    /// `|ρ| S C_γ C_α` at the benchmark values.
    pub implied_bound: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessValue {
    pub delta: f64,
    pub rv: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub target: SensitivityTarget,
    pub weights: Vec<f64>,
    pub estimate: f64,
    pub std_error: f64,
    /// `σ̂ = √E_m[w (ȳ − γ̂)²]`.
    pub sigma_hat: f64,
    /// Raw `ν̂` of the target's representer.
    pub nu_hat: f64,
    /// `S = σ̂ √max(ν̂, 0)`.
    pub s_hat: f64,
    pub rho: f64,
    pub robustness_values: Vec<RobustnessValue>,
    pub benchmarks: Vec<Benchmark>,
}

impl SensitivityReport {
    pub fn bound(&self, c_gamma: f64, c_alpha: f64) -> Result<f64> {
        bias_bound(self.sigma_hat, self.nu_hat, self.rho, c_gamma, c_alpha)
    }
}

fn residual_scale(data: &AggregateDataset, fit: &NuisanceFit) -> f64 {
    let m = data.m() as f64;
    let ybar = data.ybar();
    let ss: f64 = (0..data.m())
        .map(|g| fit.weights[g] * (ybar[g] - fit.gamma_fitted[g]).powi(2))
        .sum();
    (ss / m).sqrt()
}

/// Sensitivity quantities of a group or contrast, without benchmarks.
///
/// `deltas` defaults to one and two standard errors and `|θ̂|`.
pub fn contrast_sensitivity(
    data: &AggregateDataset,
    fit: &NuisanceFit,
    result: &EstimateResult,
    target: SensitivityTarget,
    rho: f64,
    deltas: Option<&[f64]>,
) -> Result<SensitivityReport> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("rho must lie in [0, 1], got {rho}")));
    }
    let c = target.weights(data.d())?;
    let est = dml::contrast(result, &c)?;
    let rt = RieszTarget::contrast(&fit.sieve, &c, &fit.u);
    let nu_hat = riesz::nu_hat(&fit.svd, &rt, fit.lambda)?;
    let sigma_hat = residual_scale(data, fit);
    let s_hat = sigma_hat * nu_hat.max(0.0).sqrt();
    let default_deltas = [est.std_error, 2.0 * est.std_error, est.estimate.abs()];
    let robustness_values = deltas
        .unwrap_or(&default_deltas)
        .iter()
        .filter(|&&d| d > 0.0)
        .map(|&delta| {
            Ok(RobustnessValue {
                delta,
                rv: robustness_value(rho * s_hat, delta)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SensitivityReport {
        target,
        weights: c,
        estimate: est.estimate,
        std_error: est.std_error,
        sigma_hat,
        nu_hat,
        s_hat,
        rho,
        robustness_values,
        benchmarks: Vec::new(),
    })
}

fn mean_sq(v: &[f64], w: &[f64]) -> f64 {
    v.iter().zip(w).map(|(a, b)| b * a * a).sum::<f64>() / v.len() as f64
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    }
}

fn target_alpha(fit: &NuisanceFit, c: &[f64]) -> Vec<f64> {
    fit.riesz
        .alpha_values
        .iter()
        .map(|row| dot(row, c))
        .collect()
}

/// Refits without each covariate in turn, at the full fit's penalty, and
/// compares the nuisances.
pub fn benchmark_covariates(
    data: &AggregateDataset,
    fit: &NuisanceFit,
    opts: &EstimateOptions,
    report: &SensitivityReport,
) -> Result<Vec<Benchmark>> {
    if data.p() == 0 {
        return Err(Error::InvalidArgument("benchmarking needs at least one covariate".into()));
    }
    let c = &report.weights;
    let fixed = EstimateOptions {
        lambda: LambdaChoice::Fixed { lambda: fit.lambda },
        compute_loo: false,
        ..opts.clone()
    };
    let ybar = data.ybar();
    let resid_full: Vec<f64> = ybar.iter().zip(&fit.gamma_fitted).map(|(y, f)| y - f).collect();
    let alpha_full = target_alpha(fit, c);
    let theta_full = {
        let r = dml::estimate_from_nuisance(data, fit, &fixed)?;
        dot(&r.beta, c)
    };
    (0..data.p())
        .into_par_iter()
        .map(|k| {
            let reduced = data.drop_covariate(k)?;
            let basis = fit.sieve.basis.without_covariate(k)?;
            let drop = dml::fit_nuisance_with_basis(&reduced, basis, &fixed)?;
            let res = dml::estimate_from_nuisance(&reduced, &drop, &fixed)?;
            let resid_drop: Vec<f64> = ybar.iter().zip(&drop.gamma_fitted).map(|(y, f)| y - f).collect();
            let v_full = mean_sq(&resid_full, &fit.weights);
            let v_drop = mean_sq(&resid_drop, &fit.weights);
            let r2_gamma = if v_drop > 0.0 {
                ((v_drop - v_full) / v_drop).max(0.0)
            } else {
                0.0
            };
            let alpha_drop = target_alpha(&drop, c);
            let a_full = mean_sq(&alpha_full, &fit.weights);
            let a_drop = mean_sq(&alpha_drop, &fit.weights);
            let c_alpha_sq = if a_drop > 0.0 {
                ((a_full - a_drop) / a_drop).max(0.0)
            } else {
                0.0
            };
            let c_alpha = c_alpha_sq.sqrt();
            let dg: Vec<f64> = fit.gamma_fitted.iter().zip(&drop.gamma_fitted).map(|(a, b)| a - b).collect();
            let da: Vec<f64> = alpha_full.iter().zip(&alpha_drop).map(|(a, b)| a - b).collect();
            let rho = correlation(&dg, &da);
            let c_gamma = r2_gamma.sqrt();
            Ok(Benchmark {
                covariate: data.covariate_names()[k].clone(),
                r2_gamma,
                c_gamma,
                c_alpha_sq,
                c_alpha,
                rho,
                delta_estimate: theta_full - dot(&res.beta, c),
                implied_bound: rho.abs() * report.s_hat * c_gamma * c_alpha,
            })
        })
        .collect()
}

/// A grid of sensitivity parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub c_gamma: [f64; 2],
    pub c_alpha: [f64; 2],
    pub n_gamma: usize,
    pub n_alpha: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            c_gamma: [0.0, 1.0],
            c_alpha: [0.0, 1.0],
            n_gamma: 50,
            n_alpha: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourRow {
    pub c_gamma: f64,
    pub c_alpha: f64,
    pub bound: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContourGrid {
    pub rows: Vec<ContourRow>,
    /// Bound level at which the interval first reaches zero, `|θ̂|`.
    pub zero_crossing_level: f64,
}

fn axis([lo, hi]: [f64; 2], n: usize) -> Vec<f64> {
    if n == 1 {
        vec![lo]
    } else {
        crate::linalg::linspace(lo, hi, n)
    }
}

/// Bias bounds and `θ̂ ± bound` over a grid, at the report's `ρ`.
pub fn contour_grid(report: &SensitivityReport, spec: &GridSpec) -> Result<ContourGrid> {
    if spec.n_gamma == 0 || spec.n_alpha == 0 {
        return Err(Error::InvalidArgument("grid needs at least one point per axis".into()));
    }
    let cg = axis(spec.c_gamma, spec.n_gamma);
    let ca = axis(spec.c_alpha, spec.n_alpha);
    let mut rows = Vec::with_capacity(cg.len() * ca.len());
    for &g in &cg {
        for &a in &ca {
            let bound = report.bound(g, a)?;
            rows.push(ContourRow {
                c_gamma: g,
                c_alpha: a,
                bound,
                lower: report.estimate - bound,
                upper: report.estimate + bound,
            });
        }
    }
    Ok(ContourGrid {
        rows,
        zero_crossing_level: report.estimate.abs(),
    })
}

pub fn write_contour_csv<W: Write>(grid: &ContourGrid, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["c_gamma", "c_alpha", "bound", "lower", "upper"])?;
    for r in &grid.rows {
        w.write_record([r.c_gamma, r.c_alpha, r.bound, r.lower, r.upper].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_contour_csv(grid: &ContourGrid, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_contour_csv(grid, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::GeographyRecord;
    use crate::sieve::BasisSpec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bound_examples() {
        assert_eq!(bias_bound(0.1, 4.0, 0.0, 0.1, 0.5).unwrap(), 0.0);
        assert_eq!(bias_bound(0.1, 4.0, 1.0, 0.0, 0.5).unwrap(), 0.0);
        assert!((bias_bound(0.1, 4.0, 1.0, 0.1, 0.5).unwrap() - 0.01).abs() < 1e-16);
        assert_eq!(
            bias_bound(0.1, 4.0, 1.0, 0.1, 1.0).unwrap(),
            2.0 * bias_bound(0.1, 4.0, 1.0, 0.1, 0.5).unwrap()
        );
        assert_eq!(bias_bound(0.1, -1.0, 1.0, 0.1, 0.5).unwrap(), 0.0);
        assert!(bias_bound(0.1, 1.0, 1.0, -0.1, 0.5).is_err());
    }

    fn bisect_rv(s: f64, delta: f64) -> f64 {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if equal_r2_bound(s, mid) < delta {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn robustness_value_examples() {
        let golden = (5f64.sqrt() - 1.0) / 2.0;
        assert!((robustness_value(1.0, 1.0).unwrap() - golden).abs() < 1e-15);
        assert!(robustness_value(1.0, 1e-12).unwrap() < 1e-11);
        assert_eq!(robustness_value(0.0, 0.3).unwrap(), 1.0);
        assert!(robustness_value(1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn bound_is_multiplicative(s in 0.0f64..2.0, nu in 0.0f64..10.0, rho in 0.0f64..1.0, a in 0.0f64..3.0, b in 0.0f64..3.0) {
            let base = bias_bound(s, nu, 1.0, a, b).unwrap();
            prop_assert!((bias_bound(s, nu, rho, a, b).unwrap() - rho * base).abs() <= 1e-14 * (1.0 + base));
            prop_assert!((bias_bound(s, nu, 1.0, 2.0 * a, b).unwrap() - 2.0 * base).abs() <= 1e-14 * (1.0 + base));
            prop_assert!(bias_bound(s, nu, 1.0, a + 0.1, b).unwrap() >= base);
        }

        #[test]
        fn robustness_value_roots(s in 0.01f64..10.0, delta in 0.001f64..10.0) {
            let rv = robustness_value(s, delta).unwrap();
            prop_assert!(rv > 0.0 && rv < 1.0);
            prop_assert!((equal_r2_bound(s, rv) - delta).abs() <= 1e-8 * (1.0 + delta));
            prop_assert!((rv - bisect_rv(s, delta)).abs() <= 1e-10);
            prop_assert!(robustness_value(s, delta * 1.1).unwrap() > rv);
        }
    }

    fn sample(seed: u64, m: usize) -> AggregateDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..m)
            .map(|_| {
                let z0: f64 = rng.gen_range(0.0..1.0);
                let a = (0.2 + 0.6 * z0 + rng.gen_range(-0.15..0.15)).clamp(0.01, 0.99);
                let b = [0.2 + 0.3 * z0, 0.7 - 0.2 * z0];
                GeographyRecord {
                    id: String::new(),
                    ybar: b[0] * a + b[1] * (1.0 - a) + rng.gen_range(-0.02..0.02),
                    xbar: vec![a, 1.0 - a],
                    z: vec![z0],
                    n: 1.0,
                }
            })
            .collect();
        AggregateDataset::new(records, vec!["a".into(), "b".into()], vec!["z0".into()], None).unwrap()
    }

    #[test]
    fn contrast_nu_matches_dense_oracle() {
        let data = sample(3, 80);
        let opts = EstimateOptions::new(BasisSpec::cosine(3)).with_lambda(1e-3);
        let (res, fit) = dml::estimate_full(&data, &opts).unwrap();
        let c = [1.0, -1.0];
        let rep = contrast_sensitivity(&data, &fit, &res, SensitivityTarget::Contrast(c.to_vec()), 1.0, None).unwrap();
        // ν̂ = (2 bᵀζ − ζᵀXᵀXζ)/m with ζ = (XᵀX + mλI)⁻¹ b from dense matrices.
        let x = fit.sieve.design();
        let m = data.m();
        let n = x.ncols();
        let mut b = vec![0.0; n];
        for (j, &cj) in c.iter().enumerate() {
            let w: Vec<f64> = fit.u[j].iter().map(|v| cj * v).collect();
            for (bi, p) in b.iter_mut().zip(fit.sieve.pure_weighted_sum(j, &w)) {
                *bi += p;
            }
        }
        let mut a = crate::linalg::gram(x.as_ref());
        for i in 0..n {
            a[(i, i)] += m as f64 * 1e-3;
        }
        let zeta = crate::linalg::solve_general(a.as_ref(), crate::linalg::column(&b));
        let zeta = crate::linalg::col_to_vec(zeta.as_ref(), 0);
        let xz = crate::linalg::mat_vec(x.as_ref(), &zeta);
        let dense = (2.0 * dot(&b, &zeta) - dot(&xz, &xz)) / m as f64;
        assert!((rep.nu_hat - dense).abs() <= 1e-10 * (1.0 + dense.abs()));
        let single = contrast_sensitivity(&data, &fit, &res, SensitivityTarget::Group(0), 1.0, None).unwrap();
        let e0 = contrast_sensitivity(&data, &fit, &res, SensitivityTarget::Contrast(vec![1.0, 0.0]), 1.0, None).unwrap();
        assert_eq!(single.nu_hat, e0.nu_hat);
        assert_eq!(single.estimate, res.beta[0]);
        for rv in &single.robustness_values {
            assert!((equal_r2_bound(single.s_hat, rv.rv) - rv.delta).abs() < 1e-8);
        }
    }

    #[test]
    fn contour_shapes_and_levels() {
        let report = SensitivityReport {
            target: SensitivityTarget::Group(0),
            weights: vec![1.0],
            estimate: 0.3,
            std_error: 0.01,
            sigma_hat: 0.2,
            nu_hat: 2.25,
            s_hat: 0.3,
            rho: 1.0,
            robustness_values: vec![],
            benchmarks: vec![],
        };
        let one = contour_grid(
            &report,
            &GridSpec {
                c_gamma: [0.0, 0.0],
                c_alpha: [0.0, 0.0],
                n_gamma: 1,
                n_alpha: 1,
            },
        )
        .unwrap();
        assert_eq!(one.rows.len(), 1);
        assert_eq!((one.rows[0].lower, one.rows[0].upper), (0.3, 0.3));
        let full = contour_grid(&report, &GridSpec::default()).unwrap();
        assert_eq!(full.rows.len(), 2500);
        // S C_γ C_α = |θ̂| at C_γ = C_α = 1.
        let corner = full.rows.last().unwrap();
        assert!(corner.lower.abs() < 1e-15);
        assert_eq!(full.zero_crossing_level, 0.3);
        let mut buf = Vec::new();
        write_contour_csv(&one, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("c_gamma,c_alpha,bound,lower,upper\n"));
    }

    #[test]
    fn contrast_representer_is_the_difference() {
        let data = sample(4, 60);
        let opts = EstimateOptions::new(BasisSpec::cosine(3)).with_lambda(1e-4);
        let (res, fit) = dml::estimate_full(&data, &opts).unwrap();
        let rt = RieszTarget::contrast(&fit.sieve, &[1.0, -1.0], &fit.u);
        let sol = riesz::riesz_solve(&fit.svd, &rt, fit.lambda, &fit.sqrt_w).unwrap();
        let diff = target_alpha(&fit, &[1.0, -1.0]);
        for g in 0..data.m() {
            assert!((sol.alpha[g] - diff[g]).abs() < 1e-10);
        }
        // A zero representer has ν̂ = 0 and every bound vanishes.
        let zero = contrast_sensitivity(&data, &fit, &res, SensitivityTarget::Contrast(vec![0.0, 0.0]), 1.0, None).unwrap();
        assert_eq!(zero.nu_hat, 0.0);
        assert_eq!(zero.bound(1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn duplicated_covariate_benchmark_is_zero() {
        let data = sample(5, 120);
        let z: Vec<f64> = data.records().iter().map(|r| r.z[0]).collect();
        let dup = data.with_covariate("z0_copy", &z, false).unwrap();
        let opts = EstimateOptions::new(BasisSpec::linear()).with_lambda(1e-12);
        let (res, fit) = dml::estimate_full(&dup, &opts).unwrap();
        let rep = contrast_sensitivity(&dup, &fit, &res, SensitivityTarget::Group(0), 1.0, None).unwrap();
        for b in benchmark_covariates(&dup, &fit, &opts, &rep).unwrap() {
            assert!(b.r2_gamma.abs() < 1e-8, "{b:?}");
            assert!(b.c_alpha_sq.abs() < 1e-8, "{b:?}");
            assert!(b.delta_estimate.abs() < 1e-8, "{b:?}");
        }
    }
}
