//! Synthetic data from a truncated-Normal ecological model.
//!
//! ```text
//! (x̄_g, z_g) ~ N truncated to simplex × Rᵖ, mean (μ_x, 0), cov [[Σ_x, Γᵀ], [Γ, T]]
//! η_g = Λᵀ z_g + μ_b
//! B_g ~ N(η_g, Σ_b) truncated to [0, 1]^d
//! ȳ_g = B_gᵀ x̄_g
//! ```
//!
//! `μ_x, Σ_x` are the Dirichlet(α) moments, `T` is Toeplitz with entries
//! `0.25 exp(−|i−k|/2)`, and `Γ, Λ` are random Normal matrices scaled to
//! the requested pre-truncation `R²` values.

use std::io::Write;
use std::path::Path;

use faer::Mat;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, AggregateDataset, GeographyRecord};
use crate::error::{Error, Result};
use crate::linalg::{self, normal_cdf, normal_inverse_cdf};

/// Rejection draws attempted before switching to Gibbs sampling.
pub const REJECTION_DRAWS: usize = 10_000;
/// Gibbs burn-in sweeps.
pub const GIBBS_SWEEPS: usize = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub m: usize,
    pub d: usize,
    pub p: usize,
    pub mu_b: Vec<f64>,
    pub sigma_b: Vec<Vec<f64>>,
    pub r2_xz: f64,
    pub r2_bz: f64,
    pub seed: u64,
    /// Dirichlet concentrations; `None` means `α_j = j`.
    #[serde(default)]
    pub dirichlet: Option<Vec<f64>>,
}

fn equicorrelated(d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|k| scale * if i == k { 2.0 } else { 1.0 }).collect())
        .collect()
}

impl SynthConfig {
    /// The two-group design with `μ_b = (0.3, 0.7)` and `Σ_b = 0.02(I + 11ᵀ)`.
    pub fn study1(seed: u64) -> Self {
        Self {
            m: 500,
            d: 2,
            p: 3,
            mu_b: vec![0.3, 0.7],
            sigma_b: equicorrelated(2, 0.02),
            r2_xz: 0.5,
            r2_bz: 0.5,
            seed,
            dirichlet: None,
        }
    }

    /// The grid design: `μ_b` evenly spaced on `[0.3, 0.7]`,
    /// `Σ_b = 0.005(I + 11ᵀ)`, `R²_{B∼Z} = 0.2`.
    pub fn study2(m: usize, d: usize, p: usize, r2_xz: f64, seed: u64) -> Self {
        let mu_b = if d == 1 { vec![0.5] } else { linalg::linspace(0.3, 0.7, d) };
        Self {
            m,
            d,
            p,
            mu_b,
            sigma_b: equicorrelated(d, 0.005),
            r2_xz,
            r2_bz: 0.2,
            seed,
            dirichlet: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn concentrations(&self) -> Vec<f64> {
        self.dirichlet
            .clone()
            .unwrap_or_else(|| (1..=self.d).map(|j| j as f64).collect())
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.m < 2 || self.d < 1 {
            return bad(format!("need m ≥ 2 and d ≥ 1, got m = {}, d = {}", self.m, self.d));
        }
        if self.mu_b.len() != self.d || self.sigma_b.len() != self.d || self.sigma_b.iter().any(|r| r.len() != self.d) {
            return bad("mu_b and sigma_b must match d".into());
        }
        for r2 in [self.r2_xz, self.r2_bz] {
            if !(0.0..1.0).contains(&r2) {
                return bad(format!("R² targets must lie in [0, 1), got {r2}"));
            }
        }
        if let Some(a) = &self.dirichlet {
            if a.len() != self.d || a.iter().any(|&v| !(v > 0.0)) {
                return bad("Dirichlet concentrations must be d positive numbers".into());
            }
        }
        let s = linalg::mat_from_rows(&self.sigma_b);
        let (vals, _) = linalg::symmetric_eigen(s.as_ref())?;
        if vals.first().is_some_and(|&v| v < -1e-12) {
            return bad("sigma_b is not positive semidefinite".into());
        }
        Ok(())
    }
}

/// Mean and covariance of Dirichlet(α).
pub fn dirichlet_moments(alpha: &[f64]) -> (Vec<f64>, Mat<f64>) {
    let a0: f64 = alpha.iter().sum();
    let mu: Vec<f64> = alpha.iter().map(|a| a / a0).collect();
    let d = alpha.len();
    let cov = Mat::from_fn(d, d, |i, k| {
        let diag = if i == k { mu[i] } else { 0.0 };
        (diag - mu[i] * mu[k]) / (a0 + 1.0)
    });
    (mu, cov)
}

/// Symmetric Toeplitz matrix with entries `0.25 exp(−|i−k|/2)`.
pub fn toeplitz(p: usize) -> Mat<f64> {
    Mat::from_fn(p, p, |i, k| 0.25 * (-(i.abs_diff(k) as f64) / 2.0).exp())
}

/// Subtracts each row's mean so every row sums to zero.
pub fn center_rows(g: &mut Mat<f64>) {
    let n = g.ncols() as f64;
    for i in 0..g.nrows() {
        let mean = (0..g.ncols()).map(|j| g[(i, j)]).sum::<f64>() / n;
        for j in 0..g.ncols() {
            g[(i, j)] -= mean;
        }
    }
}

fn check_r2(target: f64) -> Result<()> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::InvalidArgument(format!("R² target must lie in [0, 1), got {target}")));
    }
    Ok(())
}

/// Scales the `p × d` loading matrix `raw` column by column so that
/// `R²_j = s_jᵀ T s_j / (s_jᵀ T s_j + σ_jj)` equals `target`, where `σ_jj`
/// is the noise variance of outcome `j`.
pub fn calibrate_columns(raw: &Mat<f64>, t: &Mat<f64>, noise_var: &[f64], target: f64) -> Result<Mat<f64>> {
    check_r2(target)?;
    let (p, d) = (raw.nrows(), raw.ncols());
    let mut out = Mat::zeros(p, d);
    if target == 0.0 {
        return Ok(out);
    }
    for j in 0..d {
        let col = linalg::col_to_vec(raw.as_ref(), j);
        let explained = linalg::dot(&col, &linalg::mat_vec(t.as_ref(), &col));
        let want = target / (1.0 - target) * noise_var[j];
        let s = if explained > 0.0 { (want / explained).sqrt() } else { 0.0 };
        for k in 0..p {
            out[(k, j)] = s * col[k];
        }
    }
    Ok(out)
}

/// Orthonormalizes the columns of `a` (modified Gram–Schmidt).
fn orthonormal_columns(a: &Mat<f64>) -> Mat<f64> {
    let mut q = a.clone();
    for j in 0..q.ncols() {
        for k in 0..j {
            let r: f64 = (0..q.nrows()).map(|i| q[(i, k)] * q[(i, j)]).sum();
            for i in 0..q.nrows() {
                q[(i, j)] -= r * q[(i, k)];
            }
        }
        let nrm = (0..q.nrows()).map(|i| q[(i, j)].powi(2)).sum::<f64>().sqrt();
        for i in 0..q.nrows() {
            q[(i, j)] /= nrm;
        }
    }
    q
}

/// Symmetric square root of a PSD matrix; eigenvalues at rounding level
/// are treated as zero so null vectors stay exact.
fn sqrt_psd(a: &Mat<f64>) -> Result<Mat<f64>> {
    let n = a.nrows();
    let (vals, vecs) = linalg::symmetric_eigen(a.as_ref())?;
    let top = vals.last().copied().unwrap_or(0.0).max(0.0);
    let roots: Vec<f64> = vals
        .iter()
        .map(|&v| if v > 1e-12 * top { v.sqrt() } else { 0.0 })
        .collect();
    Ok(Mat::from_fn(n, n, |i, k| (0..n).map(|l| vecs[(i, l)] * roots[l] * vecs[(k, l)]).sum()))
}

/// Builds the `p × d` cross-covariance `Γ = √r² T^{1/2} W Σ_x^{1/2}` from a
/// Normal draw `raw`, where `W` is a partial isometry with rows orthogonal
/// to `1`.
///
/// Every canonical correlation between `z` and `x̄` equals `√target`, so
/// the joint covariance is PSD for any target below one and rows of `Γ`
/// sum to zero. When `p ≥ d − 1` each share's `R²` on `z` equals the
/// target exactly; otherwise each covariate's `R²` on `x̄` does.
pub fn calibrate_cross(raw: &Mat<f64>, t: &Mat<f64>, sigma_x: &Mat<f64>, target: f64) -> Result<Mat<f64>> {
    check_r2(target)?;
    let (p, d) = (raw.nrows(), raw.ncols());
    if target == 0.0 || p == 0 || d < 2 {
        return Ok(Mat::zeros(p, d));
    }
    let (h, _) = crate::local::hyperplane_basis(&vec![1.0; d], 0.0)?;
    let g = linalg::matmul_new(raw.as_ref(), h.as_ref());
    let a = if p >= d - 1 {
        orthonormal_columns(&g)
    } else {
        orthonormal_columns(&g.transpose().to_owned()).transpose().to_owned()
    };
    let w = linalg::matmul_new(a.as_ref(), h.transpose());
    let gamma = linalg::matmul_new(
        linalg::matmul_new(sqrt_psd(t)?.as_ref(), w.as_ref()).as_ref(),
        sqrt_psd(sigma_x)?.as_ref(),
    );
    let mut gamma = Mat::from_fn(p, d, |i, j| target.sqrt() * gamma[(i, j)]);
    center_rows(&mut gamma);
    Ok(gamma)
}

/// Draws from `N(mean, cov)` truncated to the box `[lo, hi]^d`.
#[derive(Debug, Clone)]
pub struct TruncatedNormal {
    mean: Vec<f64>,
    /// Factor `L` with `L Lᵀ = cov`.
    factor: Mat<f64>,
    /// Precision matrix, for Gibbs conditionals.
    precision: Option<Mat<f64>>,
    lo: f64,
    hi: f64,
}

/// Symmetric square-root factor that tolerates singular covariances.
fn psd_factor(cov: &Mat<f64>) -> Result<Mat<f64>> {
    let n = cov.nrows();
    let (vals, vecs) = linalg::symmetric_eigen(cov.as_ref())?;
    Ok(Mat::from_fn(n, n, |i, k| vecs[(i, k)] * vals[k].max(0.0).sqrt()))
}

impl TruncatedNormal {
    pub fn new(mean: Vec<f64>, cov: &Mat<f64>, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::InvalidArgument(format!("box must satisfy lo < hi, got [{lo}, {hi}]")));
        }
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Dimension("mean and covariance disagree".into()));
        }
        let factor = psd_factor(cov)?;
        let precision = linalg::inverse_spd(cov.as_ref()).ok();
        Ok(Self {
            mean,
            factor,
            precision,
            lo,
            hi,
        })
    }

    pub fn with_mean(&self, mean: Vec<f64>) -> Self {
        Self { mean, ..self.clone() }
    }

    fn inside(&self, x: &[f64]) -> bool {
        x.iter().all(|&v| v >= self.lo && v <= self.hi)
    }

    fn draw_untruncated<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.mean.len();
        let e: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut x = linalg::mat_vec(self.factor.as_ref(), &e);
        x.iter_mut().zip(&self.mean).for_each(|(a, b)| *a += b);
        x
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Vec<f64>> {
        if self.factor.norm_max() == 0.0 {
            return Ok(self.mean.iter().map(|v| v.clamp(self.lo, self.hi)).collect());
        }
        for _ in 0..REJECTION_DRAWS {
            let x = self.draw_untruncated(rng);
            if self.inside(&x) {
                return Ok(x);
            }
        }
        self.gibbs(rng)
    }

    /// Coordinate-wise Gibbs sampling from the clamped mean.
    pub fn gibbs<R: Rng>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let Some(prec) = &self.precision else {
            return Err(Error::SamplerExhausted);
        };
        let n = self.mean.len();
        let mut x: Vec<f64> = self.mean.iter().map(|v| v.clamp(self.lo, self.hi)).collect();
        for _ in 0..GIBBS_SWEEPS {
            for i in 0..n {
                let pii = prec[(i, i)];
                let shift: f64 = (0..n)
                    .filter(|&k| k != i)
                    .map(|k| prec[(i, k)] * (x[k] - self.mean[k]))
                    .sum();
                let mu = self.mean[i] - shift / pii;
                let sd = (1.0 / pii).sqrt();
                x[i] = truncated_normal_1d(mu, sd, self.lo, self.hi, rng)?;
            }
        }
        Ok(x)
    }
}

/// One draw of `N(mu, sd²)` truncated to `[lo, hi]` by inversion.
pub fn truncated_normal_1d<R: Rng>(mu: f64, sd: f64, lo: f64, hi: f64, rng: &mut R) -> Result<f64> {
    let a = normal_cdf((lo - mu) / sd);
    let b = normal_cdf((hi - mu) / sd);
    if !(b > a) {
        // The whole box sits deep in one tail; the nearest edge carries
        // essentially all of the mass.
        if mu.is_finite() {
            return Ok(if mu < lo { lo } else { hi });
        }
        return Err(Error::SamplerExhausted);
    }
    let u: f64 = rng.gen_range(0.0..1.0);
    let v = mu + sd * normal_inverse_cdf(a + u * (b - a));
    Ok(v.clamp(lo, hi))
}

/// A generated dataset with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub data: AggregateDataset,
    /// Local coefficients, `m × d` by row.
    pub b: Vec<Vec<f64>>,
    /// `Σ_g n_g x̄_gj B_gj / Σ_g n_g x̄_gj` on the realized sample.
    pub beta_true: Vec<f64>,
    pub mu_x: Vec<f64>,
    pub sigma_x: Mat<f64>,
    pub t: Mat<f64>,
    /// `p × d` cross-covariance of `z` and `x̄`.
    pub gamma: Mat<f64>,
    /// `p × d` loadings of `η` on `z`.
    pub lambda: Mat<f64>,
}

impl SynthDataset {
    /// Writes the B matrix, one row per geography, and a final
    /// `beta_true` row.
    pub fn write_truth<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string()];
        header.extend(self.data.group_names().iter().map(|g| format!("b_{g}")));
        w.write_record(&header)?;
        for (r, b) in self.data.records().iter().zip(&self.b) {
            let mut row = vec![r.id.clone()];
            row.extend(b.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        let mut row = vec!["beta_true".to_string()];
        row.extend(self.beta_true.iter().map(f64::to_string));
        w.write_record(&row)?;
        w.flush()?;
        Ok(())
    }

    /// Saves the dataset CSV and the truth sidecar.
    pub fn save(&self, data_path: impl AsRef<Path>, truth_path: impl AsRef<Path>) -> Result<()> {
        dataset::save_csv(&self.data, data_path)?;
        let file = std::fs::File::create(truth_path)?;
        self.write_truth(std::io::BufWriter::new(file))
    }
}

/// Size-weighted mean of the local coefficients.
pub fn beta_from_truth(data: &AggregateDataset, b: &[Vec<f64>]) -> Vec<f64> {
    (0..data.d())
        .map(|j| {
            let (mut num, mut den) = (0.0, 0.0);
            for (r, bg) in data.records().iter().zip(b) {
                num += r.n * r.xbar[j] * bg[j];
                den += r.n * r.xbar[j];
            }
            num / den
        })
        .collect()
}

fn standard_normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat<f64> {
    let mut m = Mat::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// Generates one dataset; identical configs give identical output.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let SynthConfig { m, d, p, .. } = *config;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let (mu_x, sigma_x) = dirichlet_moments(&config.concentrations());
    let t = toeplitz(p);
    let sigma_b = linalg::mat_from_rows(&config.sigma_b);

    let raw = standard_normal_matrix(&mut rng, p, d);
    let gamma = calibrate_cross(&raw, &t, &sigma_x, config.r2_xz)?;
    let noise: Vec<f64> = (0..d).map(|j| sigma_b[(j, j)]).collect();
    let raw = standard_normal_matrix(&mut rng, p, d);
    let lambda = calibrate_columns(&raw, &t, &noise, config.r2_bz)?;

    // Joint (x̄, z) covariance, with x̄ first.
    let n = d + p;
    let joint = Mat::from_fn(n, n, |i, k| match (i < d, k < d) {
        (true, true) => sigma_x[(i, k)],
        (true, false) => gamma[(k - d, i)],
        (false, true) => gamma[(i - d, k)],
        (false, false) => t[(i - d, k - d)],
    });
    let (vals, _) = linalg::symmetric_eigen(joint.as_ref())?;
    if vals.first().is_some_and(|&v| v < -1e-10) {
        return Err(Error::InvalidArgument("joint covariance of shares and covariates is not PSD".into()));
    }
    let joint_factor = psd_factor(&joint)?;
    let b_sampler = TruncatedNormal::new(config.mu_b.clone(), &sigma_b, 0.0, 1.0)?;

    let mut records = Vec::with_capacity(m);
    let mut b = Vec::with_capacity(m);
    for g in 0..m {
        let (xbar, z) = draw_shares(&mut rng, &mu_x, &joint_factor, d)?;
        let eta: Vec<f64> = (0..d)
            .map(|j| config.mu_b[j] + (0..p).map(|k| lambda[(k, j)] * z[k]).sum::<f64>())
            .collect();
        let bg = b_sampler.with_mean(eta).sample(&mut rng)?;
        let ybar = (0..d).map(|j| bg[j] * xbar[j]).sum::<f64>();
        records.push(GeographyRecord {
            id: (g + 1).to_string(),
            ybar,
            xbar,
            z,
            n: 1.0,
        });
        b.push(bg);
    }
    let data = AggregateDataset::new(
        records,
        (1..=d).map(|j| format!("x{j}")).collect(),
        (1..=p).map(|k| format!("z{k}")).collect(),
        Some([0.0, 1.0]),
    )?;
    let beta_true = beta_from_truth(&data, &b);
    Ok(SynthDataset {
        config: config.clone(),
        data,
        b,
        beta_true,
        mu_x,
        sigma_x,
        t,
        gamma,
        lambda,
    })
}

/// Draws `(x̄, z)` by rejection until `x̄` lies on the simplex.
fn draw_shares<R: Rng>(rng: &mut R, mu_x: &[f64], factor: &Mat<f64>, d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = factor.nrows();
    for _ in 0..REJECTION_DRAWS {
        let e: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let v = linalg::mat_vec(factor.as_ref(), &e);
        let mut xbar: Vec<f64> = (0..d).map(|j| mu_x[j] + v[j]).collect();
        if xbar.iter().any(|&x| x < 0.0) {
            continue;
        }
        let s: f64 = xbar.iter().sum();
        xbar.iter_mut().for_each(|x| *x /= s);
        return Ok((xbar, v[d..].to_vec()));
    }
    Err(Error::SamplerExhausted)
}
