//! Closed-form Riesz representers for the group means.
//!
//! For group `j` the representer is `α_j(x̄, z) = (x̄ ⊗ Φ(z))ᵀζ_j` with
//! `ζ_j = (XᵀX + κI)⁻¹ b_j` and target `b_j = Σ_g u_gj (e_j ⊗ Φ(z_g))`.
//! When the design carries loss weights `w`, `X` is the row-scaled design
//! `diag(√w) X` and the fitted representer satisfies the weighted
//! representation `E_m[w α γ] = E_m[u γ(e_j, ·)]` over the sieve.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, dot, par_for};
use crate::ridge::{SvdCache, LEVERAGE_TOL};
use crate::sieve::SieveDesign;

/// The linear-functional target `b = Σ_g Σ_j c_j u_gj (e_j ⊗ Φ(z_g))`.
#[derive(Debug, Clone)]
pub struct RieszTarget {
    /// The `dJ` vector `b`.
    pub b: Vec<f64>,
    /// Per-group weights `c_j u_gj`, used by the leave-one-out formula.
    pub weights: Vec<(usize, Vec<f64>)>,
}

impl RieszTarget {
    /// Target of group `j` with size weights `u`.
    pub fn group(sieve: &SieveDesign, j: usize, u: &[f64]) -> Self {
        Self {
            b: sieve.pure_weighted_sum(j, u),
            weights: vec![(j, u.to_vec())],
        }
    }

    /// Target of the contrast `Σ_j c_j β_j`.
    pub fn contrast(sieve: &SieveDesign, c: &[f64], u: &[Vec<f64>]) -> Self {
        let mut b = vec![0.0; sieve.ncols()];
        let mut weights = Vec::new();
        for (j, (&cj, uj)) in c.iter().zip(u).enumerate() {
            if cj == 0.0 {
                continue;
            }
            let w: Vec<f64> = uj.iter().map(|v| cj * v).collect();
            for (bi, pi) in b.iter_mut().zip(sieve.pure_weighted_sum(j, &w)) {
                *bi += pi;
            }
            weights.push((j, w));
        }
        Self { b, weights }
    }
}

/// Representer coefficients and in-sample values for one target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RieszSolution {
    pub zeta: Vec<f64>,
    /// `α(x̄_g, z_g)` for every `g`, on the unweighted scale.
    pub alpha: Vec<f64>,
    /// `E_m[w α²]`.
    pub second_moment: f64,
    /// `E_m[2 m(α) − w α²]`, unfloored.
    pub nu_hat: f64,
}

/// Spectral pieces shared by the solve, `ν̂`, and LOO.
struct Spectral {
    vtb: Vec<f64>,
    perp_sq: f64,
    kappa: f64,
}

fn spectral(svd: &SvdCache, b: &[f64], kappa: f64) -> Spectral {
    let vtb = svd.vt(b);
    let perp_sq = if svd.full_column_rank() {
        0.0
    } else {
        (dot(b, b) - dot(&vtb, &vtb)).max(0.0)
    };
    Spectral { vtb, perp_sq, kappa }
}

/// Solves for the representer of `target`. `sqrt_w` holds the row scale of
/// the decomposed design (all ones when unweighted).
pub fn riesz_solve(svd: &SvdCache, target: &RieszTarget, lambda: f64, sqrt_w: &[f64]) -> Result<RieszSolution> {
    let kappa = svd.kappa(lambda)?;
    let m = svd.nrows() as f64;
    let sp = spectral(svd, &target.b, kappa);
    let zeta = svd.solve_penalized(&target.b, kappa);
    let coef: Vec<f64> = sp
        .vtb
        .iter()
        .zip(&svd.d)
        .map(|(c, &s)| c * s / (s * s + kappa))
        .collect();
    let scaled = svd.u_mul(&coef);
    let alpha: Vec<f64> = scaled.iter().zip(sqrt_w).map(|(a, s)| a / s).collect();
    let second_moment = dot(&scaled, &scaled) / m;
    Ok(RieszSolution {
        zeta,
        alpha,
        second_moment,
        nu_hat: nu_from(svd, &sp) / m,
    })
}

fn nu_from(svd: &SvdCache, sp: &Spectral) -> f64 {
    let k = sp.kappa;
    let main: f64 = sp
        .vtb
        .iter()
        .zip(&svd.d)
        .map(|(c, &s)| {
            let t = s * s + k;
            c * c * (2.0 / t - s * s / (t * t))
        })
        .sum();
    let perp = if sp.perp_sq > 0.0 && k > 0.0 { 2.0 * sp.perp_sq / k } else { 0.0 };
    main + perp
}

/// `ν̂ = E_m[2 m(α̂) − w α̂²]` in closed form. May be negative under
/// penalization; callers floor it at zero before taking square roots.
pub fn nu_hat(svd: &SvdCache, target: &RieszTarget, lambda: f64) -> Result<f64> {
    let kappa = svd.kappa(lambda)?;
    let sp = spectral(svd, &target.b, kappa);
    let nu = nu_from(svd, &sp) / svd.nrows() as f64;
    if nu < 0.0 {
        log::warn!("nu_hat is negative ({nu:e}); it is floored at zero where a square root is taken");
    }
    Ok(nu)
}

/// Leave-one-out representer values `α_(−i)(x̄_i, z_i)`, with the sum-scale
/// penalty held fixed.
pub fn riesz_loo(
    svd: &SvdCache,
    sieve: &SieveDesign,
    target: &RieszTarget,
    lambda: f64,
    sqrt_w: &[f64],
) -> Result<Vec<f64>> {
    let kappa = svd.kappa(lambda)?;
    let m = svd.nrows();
    let r = svd.rank();
    let jj = sieve.j();
    let filt: Vec<f64> = svd.d.iter().map(|&s| s / (s * s + kappa)).collect();
    let comp: Vec<f64> = svd.d.iter().map(|&s| kappa / (s * s + kappa)).collect();
    let one_minus_h = svd.leverage_complement(&comp);
    if let Some(i) = one_minus_h.iter().position(|&v| v <= LEVERAGE_TOL) {
        return Err(Error::Leverage(i));
    }
    let sp = spectral(svd, &target.b, kappa);
    let coef: Vec<f64> = sp.vtb.iter().zip(&filt).map(|(c, f)| c * f).collect();
    let scaled_alpha = svd.u_mul(&coef);

    // x̃_iᵀ(XᵀX + κI)⁻¹ t_i where t_i = Σ_j c_j u_ij (e_j ⊗ Φ_i).
    let mut own = vec![0.0; m];
    const BLOCK: usize = 1024;
    for (j, w) in &target.weights {
        let vj = svd.v.as_ref().subrows(j * jj, jj);
        let mut start = 0;
        while start < m {
            let rows = BLOCK.min(m - start);
            let phi = sieve.phi.as_ref().subrows(start, rows);
            let mut pv = Mat::<f64>::zeros(rows, r);
            faer::linalg::matmul::matmul(
                pv.as_mut(),
                faer::Accum::Replace,
                phi,
                vj,
                1.0,
                par_for(rows * jj * r),
            );
            for i in 0..rows {
                let g = start + i;
                let s: f64 = (0..r).map(|k| svd.u[(g, k)] * filt[k] * pv[(i, k)]).sum();
                own[g] += w[g] * s;
            }
            start += rows;
        }
    }
    Ok((0..m)
        .map(|i| (scaled_alpha[i] - sqrt_w[i] * own[i]) / one_minus_h[i] / sqrt_w[i])
        .collect())
}

/// Closed-form representer under a Gaussian, homoskedastic model for
/// `x̄_j | z` with unit sizes: `α = x̄_j (x̄_j − E[x̄_j | z]) / (ς² E[x̄_j])`.
/// The conditional mean is the least-squares projection of `x̄_j` on the
/// sieve `Φ`. Intended only as a diagnostic cross-check.
pub fn gaussian_representer(sieve: &SieveDesign, j: usize) -> Result<Vec<f64>> {
    let m = sieve.m();
    let x: Vec<f64> = linalg::col_to_vec(sieve.xbar.as_ref(), j);
    let svd = SvdCache::new(sieve.phi.as_ref())?;
    let utx = svd.ut(&x);
    let fitted = svd.u_mul(&utx);
    let resid: Vec<f64> = x.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let dof = (m as f64 - svd.rank() as f64).max(1.0);
    let var = dot(&resid, &resid) / dof;
    let mean = x.iter().sum::<f64>() / m as f64;
    if var <= 0.0 || mean <= 0.0 {
        return Err(Error::InvalidData(format!(
            "group {j} shares have no residual variation or zero mean"
        )));
    }
    Ok(x.iter().zip(&resid).map(|(xi, ri)| xi * ri / (var * mean)).collect())
}

/// All per-group representers for one penalty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RieszFit {
    pub zeta: Vec<Vec<f64>>,
    /// `m × d` values, row-major by geography.
    pub alpha_values: Vec<Vec<f64>>,
    pub second_moment: Vec<f64>,
    pub nu_hat: Vec<f64>,
    pub loo_alpha: Option<Vec<Vec<f64>>>,
}

impl RieszFit {
    /// Column `j` of the `α̂` matrix.
    pub fn alpha(&self, j: usize) -> Vec<f64> {
        self.alpha_values.iter().map(|r| r[j]).collect()
    }
}

/// Solves every group's representer; optionally adds LOO values.
pub fn fit_all(
    svd: &SvdCache,
    sieve: &SieveDesign,
    u: &[Vec<f64>],
    lambda: f64,
    sqrt_w: &[f64],
    with_loo: bool,
) -> Result<RieszFit> {
    use rayon::prelude::*;
    let d = sieve.d();
    let sols: Vec<(RieszSolution, Option<Vec<f64>>)> = (0..d)
        .into_par_iter()
        .map(|j| {
            let target = RieszTarget::group(sieve, j, &u[j]);
            let sol = riesz_solve(svd, &target, lambda, sqrt_w)?;
            let loo = if with_loo {
                Some(riesz_loo(svd, sieve, &target, lambda, sqrt_w)?)
            } else {
                None
            };
            Ok((sol, loo))
        })
        .collect::<Result<_>>()?;
    for (j, (s, _)) in sols.iter().enumerate() {
        if s.nu_hat < 0.0 {
            log::warn!("nu_hat for group {j} is negative ({:e})", s.nu_hat);
        }
    }
    let m = sieve.m();
    let alpha_values = (0..m).map(|g| sols.iter().map(|(s, _)| s.alpha[g]).collect()).collect();
    let loo_alpha = with_loo.then(|| {
        (0..m)
            .map(|g| sols.iter().map(|(_, l)| l.as_ref().map_or(f64::NAN, |l| l[g])).collect())
            .collect()
    });
    Ok(RieszFit {
        zeta: sols.iter().map(|(s, _)| s.zeta.clone()).collect(),
        second_moment: sols.iter().map(|(s, _)| s.second_moment).collect(),
        nu_hat: sols.iter().map(|(s, _)| s.nu_hat).collect(),
        alpha_values,
        loo_alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{compute_u, AggregateDataset, GeographyRecord};
    use crate::linalg::{matmul_new, solve_general};
    use crate::sieve::BasisSpec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_data(rng: &mut ChaCha8Rng, m: usize, d: usize, p: usize) -> AggregateDataset {
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
                    n: rng.gen_range(0.5..2.0),
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

    fn setup(data: &AggregateDataset, spec: &BasisSpec) -> (SieveDesign, SvdCache, Vec<Vec<f64>>) {
        let s = SieveDesign::build(spec, data).unwrap();
        let svd = SvdCache::new(s.design().as_ref()).unwrap();
        let u = (0..data.d()).map(|j| compute_u(data, j).unwrap().values).collect();
        (s, svd, u)
    }

    /// `(XᵀX + κI)⁻¹ Σ_g u_g pure_g` by a dense solve.
    fn dense_zeta(s: &SieveDesign, j: usize, u: &[f64], kappa: f64) -> Vec<f64> {
        let x = s.design();
        let mut a = matmul_new(x.transpose(), x.as_ref());
        for i in 0..a.nrows() {
            a[(i, i)] += kappa;
        }
        let pure = s.pure_rows(j);
        let b = linalg::mat_t_vec(pure.as_ref(), u);
        let sol = solve_general(a.as_ref(), linalg::column(&b));
        linalg::col_to_vec(sol.as_ref(), 0)
    }

    #[test]
    fn mean_functional_has_unit_representer() {
        let data = AggregateDataset::new(
            (0..5)
                .map(|g| GeographyRecord {
                    id: String::new(),
                    ybar: g as f64,
                    xbar: vec![1.0],
                    z: vec![],
                    n: 1.0,
                })
                .collect(),
            vec!["a".into()],
            vec![],
            None,
        )
        .unwrap();
        let (s, svd, u) = setup(&data, &BasisSpec::intercept_only());
        let ones = vec![1.0; 5];
        let t = RieszTarget::group(&s, 0, &u[0]);
        let sol = riesz_solve(&svd, &t, 0.0, &ones).unwrap();
        assert!((sol.zeta[0] - 1.0).abs() < 1e-14);
        assert!(sol.alpha.iter().all(|a| (a - 1.0).abs() < 1e-14));
        assert!((nu_hat(&svd, &t, 0.0).unwrap() - 1.0).abs() < 1e-14);
        let loo = riesz_loo(&svd, &s, &t, 0.0, &ones).unwrap();
        assert!(loo.iter().all(|a| (a - 1.0).abs() < 1e-12));
    }

    #[test]
    fn large_penalty_shrinks_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = random_data(&mut rng, 20, 2, 1);
        let (s, svd, u) = setup(&data, &BasisSpec::cosine(3));
        let ones = vec![1.0; 20];
        let t = RieszTarget::group(&s, 0, &u[0]);
        let sol = riesz_solve(&svd, &t, 1e8, &ones).unwrap();
        assert!(sol.alpha.iter().all(|a| a.abs() < 1e-6));
        assert!(nu_hat(&svd, &t, 1e8).unwrap().abs() < 1e-6);
        let loo = riesz_loo(&svd, &s, &t, 1e8, &ones).unwrap();
        assert!(loo.iter().all(|a| a.abs() < 1e-6));
    }

    #[test]
    fn two_group_intercept_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = random_data(&mut rng, 4, 2, 0);
        let (s, svd, u) = setup(&data, &BasisSpec::intercept_only());
        for j in 0..2 {
            let t = RieszTarget::group(&s, j, &u[j]);
            let sol = riesz_solve(&svd, &t, 0.0, &[1.0; 4]).unwrap();
            let oracle = dense_zeta(&s, j, &u[j], 0.0);
            for (a, b) in sol.zeta.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn null_space_component_is_included() {
        // With dJ > m part of b lies outside the design's row space.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = random_data(&mut rng, 5, 2, 2);
        let (s, svd, u) = setup(&data, &BasisSpec::cosine(4));
        assert!(!svd.full_column_rank());
        let lambda = 0.05;
        let kappa = 5.0 * lambda;
        let t = RieszTarget::group(&s, 1, &u[1]);
        let sol = riesz_solve(&svd, &t, lambda, &[1.0; 5]).unwrap();
        let oracle = dense_zeta(&s, 1, &u[1], kappa);
        for (a, b) in sol.zeta.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
        // ν̂ against E_m[2 u α(e_j,·) − α²] evaluated densely.
        let pure = s.pure_rows(1);
        let m_alpha = linalg::mat_vec(pure.as_ref(), &oracle);
        let alpha = linalg::mat_vec(s.design().as_ref(), &oracle);
        let dense: f64 = (0..5).map(|g| 2.0 * u[1][g] * m_alpha[g] - alpha[g] * alpha[g]).sum::<f64>() / 5.0;
        assert!((nu_hat(&svd, &t, lambda).unwrap() - dense).abs() < 1e-9);
    }

    #[test]
    fn gaussian_representer_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = random_data(&mut rng, 200, 2, 1);
        let s = SieveDesign::build(&BasisSpec::linear(), &data).unwrap();
        let a = gaussian_representer(&s, 0).unwrap();
        assert_eq!(a.len(), 200);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    fn refit_loo(s: &SieveDesign, j: usize, u: &[f64], kappa: f64) -> Vec<f64> {
        let x = s.design();
        let pure = s.pure_rows(j);
        let m = s.m();
        (0..m)
            .map(|i| {
                let keep: Vec<usize> = (0..m).filter(|&g| g != i).collect();
                let xs = Mat::from_fn(m - 1, x.ncols(), |r, c| x[(keep[r], c)]);
                let mut a = matmul_new(xs.transpose(), xs.as_ref());
                for k in 0..a.nrows() {
                    a[(k, k)] += kappa;
                }
                let b: Vec<f64> = (0..x.ncols())
                    .map(|c| keep.iter().map(|&g| u[g] * pure[(g, c)]).sum())
                    .collect();
                let zeta = solve_general(a.as_ref(), linalg::column(&b));
                (0..x.ncols()).map(|c| x[(i, c)] * zeta[(c, 0)]).sum()
            })
            .collect()
    }

    #[test]
    fn loo_toy_matches_refits() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = random_data(&mut rng, 6, 2, 1);
        let (s, svd, u) = setup(&data, &BasisSpec::linear());
        for lambda in [0.0, 0.01, 0.5] {
            for j in 0..2 {
                let t = RieszTarget::group(&s, j, &u[j]);
                let loo = riesz_loo(&svd, &s, &t, lambda, &[1.0; 6]).unwrap();
                let oracle = refit_loo(&s, j, &u[j], 6.0 * lambda);
                for (a, b) in loo.iter().zip(&oracle) {
                    assert!((a - b).abs() < 1e-8, "{a} vs {b}");
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn representation_at_zero_penalty(seed in any::<u64>(), m in 12usize..30, d in 1usize..4, terms in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = random_data(&mut rng, m, d, 1);
            let (s, svd, u) = setup(&data, &BasisSpec::cosine(terms));
            prop_assume!(svd.full_column_rank());
            let x = s.design();
            let ones = vec![1.0; m];
            for j in 0..d {
                let t = RieszTarget::group(&s, j, &u[j]);
                let sol = riesz_solve(&svd, &t, 0.0, &ones).unwrap();
                // every basis direction
                for c in 0..s.ncols() {
                    let lhs: f64 = (0..m).map(|g| sol.alpha[g] * x[(g, c)]).sum::<f64>() / m as f64;
                    let rhs = t.b[c] / m as f64;
                    prop_assert!((lhs - rhs).abs() <= 1e-8);
                }
                // random members of the sieve
                for _ in 0..20 {
                    let theta: Vec<f64> = (0..s.ncols()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let gamma = s.eval_design(&theta);
                    let pure = s.eval_pure(&theta, j);
                    let lhs: f64 = (0..m).map(|g| sol.alpha[g] * gamma[g]).sum::<f64>() / m as f64;
                    let rhs: f64 = (0..m).map(|g| u[j][g] * pure[g]).sum::<f64>() / m as f64;
                    prop_assert!((lhs - rhs).abs() <= 1e-8);
                }
                // ν̂ equals the second moment at λ = 0
                prop_assert!((sol.nu_hat - sol.second_moment).abs() <= 1e-10 * (1.0 + sol.second_moment));
                prop_assert!(sol.second_moment >= 1.0 - 1e-6);
            }
        }

        #[test]
        fn loo_matches_refits(seed in any::<u64>(), m in 5usize..30, lambda in prop::sample::select(vec![0.0, 1e-3, 0.1])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = random_data(&mut rng, m, 2, 1);
            let (s, svd, u) = setup(&data, &BasisSpec::linear());
            prop_assume!(svd.full_column_rank());
            let t = RieszTarget::group(&s, 0, &u[0]);
            match riesz_loo(&svd, &s, &t, lambda, &vec![1.0; m]) {
                Ok(loo) => {
                    let oracle = refit_loo(&s, 0, &u[0], m as f64 * lambda);
                    for (a, b) in loo.iter().zip(&oracle) {
                        prop_assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()));
                    }
                }
                Err(Error::Leverage(_)) => {}
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }
}
