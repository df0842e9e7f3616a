//! Sieve bases over covariates and the interacted designs `x̄ ⊗ Φ(z)`.
//!
//! Non-indicator covariates are min-max scaled to `[0, 1]` and expanded
//! by the chosen family. Indicator covariates skip the expansion and are
//! appended as linear terms. Term 0 is always the constant function.

use std::f64::consts::{PI, SQRT_2};

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::AggregateDataset;
use crate::error::{Error, Result};

/// Basis family and its size parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BasisFamily {
    /// The constant function only; covariates are ignored.
    InterceptOnly,
    /// `1, z_1, …, z_p`.
    Linear,
    /// Tensor monomials with every variable's degree at most `max_degree`,
    /// optionally truncated to the first `max_terms` in term order.
    Polynomial {
        max_degree: usize,
        #[serde(default)]
        max_terms: Option<usize>,
    },
    /// Tensor-product B-splines of the given order (4 is cubic) on clamped
    /// uniform knots.
    Spline {
        #[serde(default = "default_spline_order")]
        order: usize,
        interior_knots: usize,
        #[serde(default)]
        max_terms: Option<usize>,
    },
    /// Tensor products of `1, √2 cos(πkz)`, truncated to `terms` functions.
    Cosine { terms: usize },
}

fn default_spline_order() -> usize {
    4
}

/// How tensor-product terms are ordered before truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermOrdering {
    /// Nondecreasing total frequency (or degree), ties broken by ascending
    /// lexicographic order of the per-variable tuple.
    #[default]
    TotalFrequencyLex,
}

/// Serializable basis configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    #[serde(flatten)]
    pub family: BasisFamily,
    #[serde(default)]
    pub ordering: TermOrdering,
}

impl BasisSpec {
    pub fn intercept_only() -> Self {
        Self::new(BasisFamily::InterceptOnly)
    }

    pub fn linear() -> Self {
        Self::new(BasisFamily::Linear)
    }

    pub fn cosine(terms: usize) -> Self {
        Self::new(BasisFamily::Cosine { terms })
    }

    pub fn polynomial(max_degree: usize) -> Self {
        Self::new(BasisFamily::Polynomial {
            max_degree,
            max_terms: None,
        })
    }

    pub fn spline(interior_knots: usize) -> Self {
        Self::new(BasisFamily::Spline {
            order: 4,
            interior_knots,
            max_terms: None,
        })
    }

    pub fn new(family: BasisFamily) -> Self {
        Self {
            family,
            ordering: TermOrdering::TotalFrequencyLex,
        }
    }
}

/// Affine map of one covariate onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingMap {
    pub min: f64,
    pub max: f64,
}

impl ScalingMap {
    pub fn apply(&self, v: f64) -> f64 {
        if self.max > self.min {
            (v - self.min) / (self.max - self.min)
        } else {
            0.5
        }
    }
}

/// Fits min-max maps for every covariate column of an `m × p` matrix.
pub fn fit_scaling(z: &Mat<f64>) -> Result<Vec<ScalingMap>> {
    (0..z.ncols())
        .map(|k| {
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            for g in 0..z.nrows() {
                let v = z[(g, k)];
                if !v.is_finite() {
                    return Err(Error::InvalidData(format!("non-finite covariate {k} at row {g}")));
                }
                min = min.min(v);
                max = max.max(v);
            }
            Ok(ScalingMap { min, max })
        })
        .collect()
}

/// Scales a covariate matrix; returns the scaled values and the maps.
pub fn scale_covariates(data: &AggregateDataset) -> Result<(Mat<f64>, Vec<ScalingMap>)> {
    let z = data.z_matrix();
    let maps = fit_scaling(&z)?;
    let scaled = Mat::from_fn(z.nrows(), z.ncols(), |g, k| maps[k].apply(z[(g, k)]));
    Ok((scaled, maps))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum FactorKind {
    Identity,
    Cosine(usize),
    Power(usize),
    BSpline(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Factor {
    var: usize,
    kind: FactorKind,
}

/// One basis function: a product of univariate factors (empty = constant).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    factors: Vec<Factor>,
}

impl Term {
    pub fn involves(&self, var: usize) -> bool {
        self.factors.iter().any(|f| f.var == var)
    }
}

/// A basis bound to training-data scaling, evaluable at new points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedBasis {
    pub spec: BasisSpec,
    pub scaling: Vec<ScalingMap>,
    pub indicators: Vec<bool>,
    terms: Vec<Term>,
    knots: Vec<f64>,
}

impl FittedBasis {
    /// Fits scaling maps on `data` and enumerates the basis terms.
    pub fn fit(spec: &BasisSpec, data: &AggregateDataset) -> Result<Self> {
        let z = data.z_matrix();
        let scaling = fit_scaling(&z)?;
        Self::with_scaling(spec, scaling, data.indicators().to_vec())
    }

    /// Enumerates terms for given scaling maps and indicator flags.
    pub fn with_scaling(spec: &BasisSpec, scaling: Vec<ScalingMap>, indicators: Vec<bool>) -> Result<Self> {
        if scaling.len() != indicators.len() {
            return Err(Error::Dimension("scaling maps and indicator flags differ in length".into()));
        }
        let vars: Vec<usize> = (0..indicators.len()).filter(|&k| !indicators[k]).collect();
        let ind_vars: Vec<usize> = (0..indicators.len()).filter(|&k| indicators[k]).collect();
        let mut knots = Vec::new();
        let mut terms = match &spec.family {
            BasisFamily::InterceptOnly => vec![Term { factors: vec![] }],
            BasisFamily::Linear => std::iter::once(Term { factors: vec![] })
                .chain(vars.iter().map(|&var| Term {
                    factors: vec![Factor {
                        var,
                        kind: FactorKind::Identity,
                    }],
                }))
                .collect(),
            BasisFamily::Cosine { terms } => {
                if *terms == 0 {
                    return Err(Error::InvalidArgument("cosine basis needs at least one term".into()));
                }
                let tuples = ordered_tuples(vars.len(), None, *terms);
                if tuples.len() < *terms {
                    return Err(Error::InvalidArgument(format!(
                        "{terms} cosine terms requested but only {} exist for {} covariates",
                        tuples.len(),
                        vars.len()
                    )));
                }
                tuples
                    .iter()
                    .map(|t| product_term(&vars, t, FactorKind::Cosine, |_| false))
                    .collect()
            }
            BasisFamily::Polynomial { max_degree, max_terms } => {
                let all = ordered_tuples(vars.len(), Some(*max_degree), usize::MAX);
                let n = truncate_count(all.len(), *max_terms, "polynomial")?;
                all[..n]
                    .iter()
                    .map(|t| product_term(&vars, t, FactorKind::Power, |_| false))
                    .collect()
            }
            BasisFamily::Spline {
                order,
                interior_knots,
                max_terms,
            } => {
                if *order == 0 {
                    return Err(Error::InvalidArgument("spline order must be positive".into()));
                }
                knots = clamped_knots(*order, *interior_knots);
                let nb = order + interior_knots;
                // The full tensor product spans the constants, so the
                // all-first product is replaced by the explicit intercept.
                let all: Vec<Vec<usize>> = ordered_tuples(vars.len(), Some(nb - 1), usize::MAX)
                    .into_iter()
                    .filter(|t| t.iter().any(|&i| i > 0))
                    .collect();
                let n = truncate_count(all.len() + 1, *max_terms, "spline")?;
                std::iter::once(Term { factors: vec![] })
                    .chain(
                        all[..n - 1]
                            .iter()
                            .map(|t| product_term(&vars, t, FactorKind::BSpline, |_| true)),
                    )
                    .collect()
            }
        };
        if !matches!(spec.family, BasisFamily::InterceptOnly) {
            terms.extend(ind_vars.iter().map(|&var| Term {
                factors: vec![Factor {
                    var,
                    kind: FactorKind::Identity,
                }],
            }));
        }
        Ok(Self {
            spec: spec.clone(),
            scaling,
            indicators,
            terms,
            knots,
        })
    }

    /// Number of basis functions `J`.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Indices of the terms that depend on covariate `k`.
    pub fn terms_involving(&self, k: usize) -> Vec<usize> {
        (0..self.terms.len()).filter(|&t| self.terms[t].involves(k)).collect()
    }

    /// The basis with covariate `k` removed, for a dataset whose covariate
    /// `k` has been dropped. Cosine, polynomial, and linear bases keep every
    /// term not involving `k`, so the result is nested in `self`; splines are
    /// re-enumerated over the remaining covariates.
    pub fn without_covariate(&self, k: usize) -> Result<Self> {
        if k >= self.scaling.len() {
            return Err(Error::InvalidArgument(format!("covariate index {k} out of range")));
        }
        let mut scaling = self.scaling.clone();
        scaling.remove(k);
        let mut indicators = self.indicators.clone();
        indicators.remove(k);
        if matches!(self.spec.family, BasisFamily::Spline { .. }) && !self.indicators[k] {
            return Self::with_scaling(&self.spec, scaling, indicators);
        }
        let remap = |f: &Factor| Factor {
            var: if f.var > k { f.var - 1 } else { f.var },
            kind: f.kind,
        };
        let terms = self
            .terms
            .iter()
            .filter(|t| !t.involves(k))
            .map(|t| Term {
                factors: t.factors.iter().map(remap).collect(),
            })
            .collect();
        Ok(Self {
            spec: self.spec.clone(),
            scaling,
            indicators,
            terms,
            knots: self.knots.clone(),
        })
    }

    /// Evaluates all terms at one raw (unscaled) covariate vector.
    pub fn eval_row(&self, z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), self.scaling.len());
        debug_assert_eq!(out.len(), self.terms.len());
        let scaled: Vec<f64> = z
            .iter()
            .zip(&self.scaling)
            .zip(&self.indicators)
            .map(|((&v, s), &ind)| if ind { v } else { s.apply(v) })
            .collect();
        let order = match self.spec.family {
            BasisFamily::Spline { order, .. } => order,
            _ => 0,
        };
        let splines: Vec<Vec<f64>> = if order > 0 {
            scaled
                .iter()
                .map(|&x| bspline_all(&self.knots, order, x.clamp(0.0, 1.0)))
                .collect()
        } else {
            Vec::new()
        };
        for (o, term) in out.iter_mut().zip(&self.terms) {
            *o = term.factors.iter().fold(1.0, |acc, f| {
                let x = scaled[f.var];
                acc * match f.kind {
                    FactorKind::Identity => x,
                    FactorKind::Cosine(k) => SQRT_2 * (PI * k as f64 * x).cos(),
                    FactorKind::Power(k) => x.powi(k as i32),
                    FactorKind::BSpline(i) => splines[f.var][i],
                }
            });
        }
    }

    /// Evaluates the basis at every row of a raw `m × p` covariate matrix.
    pub fn eval(&self, z: &Mat<f64>) -> Mat<f64> {
        let m = z.nrows();
        let j = self.len();
        let rows: Vec<Vec<f64>> = (0..m)
            .into_par_iter()
            .map(|g| {
                let zr: Vec<f64> = (0..z.ncols()).map(|k| z[(g, k)]).collect();
                let mut out = vec![0.0; j];
                self.eval_row(&zr, &mut out);
                out
            })
            .collect();
        Mat::from_fn(m, j, |g, k| rows[g][k])
    }
}

fn truncate_count(available: usize, requested: Option<usize>, family: &str) -> Result<usize> {
    match requested {
        None => Ok(available),
        Some(0) => Err(Error::InvalidArgument(format!("{family} basis needs at least one term"))),
        Some(n) if n > available => Err(Error::InvalidArgument(format!(
            "{n} {family} terms requested but only {available} exist at this degree"
        ))),
        Some(n) => Ok(n),
    }
}

fn product_term(vars: &[usize], tuple: &[usize], kind: fn(usize) -> FactorKind, keep_zero: fn(usize) -> bool) -> Term {
    Term {
        factors: vars
            .iter()
            .zip(tuple)
            .filter(|(_, &t)| t > 0 || keep_zero(t))
            .map(|(&var, &t)| Factor { var, kind: kind(t) })
            .collect(),
    }
}

/// Nonnegative integer tuples of length `p`, ordered by total then
/// lexicographically, each entry at most `cap` (when given), stopping
/// after `limit` tuples.
fn ordered_tuples(p: usize, cap: Option<usize>, limit: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; p]];
    if p == 0 || cap == Some(0) {
        return out;
    }
    let max_total = cap.map_or(usize::MAX, |c| c * p);
    let mut total = 1;
    while out.len() < limit && total <= max_total {
        let mut cur = vec![0; p];
        fill_tuples(&mut cur, 0, total, cap.unwrap_or(usize::MAX), &mut out, limit);
        total += 1;
    }
    out
}

fn fill_tuples(cur: &mut Vec<usize>, pos: usize, remaining: usize, cap: usize, out: &mut Vec<Vec<usize>>, limit: usize) {
    if out.len() >= limit {
        return;
    }
    let p = cur.len();
    if pos == p - 1 {
        if remaining <= cap {
            cur[pos] = remaining;
            out.push(cur.clone());
        }
        return;
    }
    // Remaining positions can absorb at most cap each.
    let rest_cap = cap.saturating_mul(p - pos - 1);
    let lo = remaining.saturating_sub(rest_cap);
    for v in lo..=remaining.min(cap) {
        cur[pos] = v;
        fill_tuples(cur, pos + 1, remaining - v, cap, out, limit);
        if out.len() >= limit {
            break;
        }
    }
    cur[pos] = 0;
}

fn clamped_knots(order: usize, interior: usize) -> Vec<f64> {
    let mut knots = vec![0.0; order];
    knots.extend((1..=interior).map(|i| i as f64 / (interior + 1) as f64));
    knots.extend(std::iter::repeat(1.0).take(order));
    knots
}

/// All `order + interior` B-spline basis values at `x ∈ [0, 1]`.
fn bspline_all(knots: &[f64], order: usize, x: f64) -> Vec<f64> {
    let n = knots.len() - order;
    let degree = order - 1;
    // Knot span containing x, with the right endpoint in the last span.
    let span = if x >= knots[n] {
        n - 1
    } else {
        let mut s = degree;
        while s + 1 < n && knots[s + 1] <= x {
            s += 1;
        }
        s
    };
    let mut nonzero = vec![0.0; order];
    let mut left = vec![0.0; order];
    let mut right = vec![0.0; order];
    nonzero[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = nonzero[r] / (right[r + 1] + left[j - r]);
            nonzero[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        nonzero[j] = saved;
    }
    let mut out = vec![0.0; n];
    for (r, v) in nonzero.into_iter().enumerate() {
        out[span - degree + r] = v;
    }
    out
}

/// Evaluated sieve with the shares it is interacted with.
///
/// The interacted design has row `g` equal to `x̄_g ⊗ Φ(z_g)` in group-major
/// layout: group `j` occupies columns `jJ .. (j+1)J`. The pure row for
/// group `j` is `e_j ⊗ Φ(z_g)`.
#[derive(Debug, Clone)]
pub struct SieveDesign {
    pub basis: FittedBasis,
    /// `m × J` evaluated basis.
    pub phi: Mat<f64>,
    /// `m × d` shares.
    pub xbar: Mat<f64>,
}

impl SieveDesign {
    /// Fits the basis on `data` and evaluates it.
    pub fn build(spec: &BasisSpec, data: &AggregateDataset) -> Result<Self> {
        let basis = FittedBasis::fit(spec, data)?;
        Ok(Self::from_basis(basis, data))
    }

    pub fn from_basis(basis: FittedBasis, data: &AggregateDataset) -> Self {
        let phi = basis.eval(&data.z_matrix());
        interact(basis, phi, data)
    }

    pub fn m(&self) -> usize {
        self.phi.nrows()
    }

    pub fn d(&self) -> usize {
        self.xbar.ncols()
    }

    /// Basis size `J`.
    pub fn j(&self) -> usize {
        self.phi.ncols()
    }

    /// Coefficient count `dJ`.
    pub fn ncols(&self) -> usize {
        self.d() * self.j()
    }

    /// The `m × dJ` interacted design.
    pub fn design(&self) -> Mat<f64> {
        let jj = self.j();
        Mat::from_fn(self.m(), self.ncols(), |g, c| self.xbar[(g, c / jj)] * self.phi[(g, c % jj)])
    }

    /// The design with row `g` scaled by `scale[g]`.
    pub fn scaled_design(&self, scale: &[f64]) -> Mat<f64> {
        let jj = self.j();
        Mat::from_fn(self.m(), self.ncols(), |g, c| {
            scale[g] * self.xbar[(g, c / jj)] * self.phi[(g, c % jj)]
        })
    }

    /// The `m × dJ` matrix of pure rows `e_j ⊗ Φ(z_g)` for group `j`.
    pub fn pure_rows(&self, j: usize) -> Mat<f64> {
        let jj = self.j();
        Mat::from_fn(self.m(), self.ncols(), |g, c| if c / jj == j { self.phi[(g, c % jj)] } else { 0.0 })
    }

    /// Design row `g`.
    pub fn design_row(&self, g: usize) -> Vec<f64> {
        let jj = self.j();
        (0..self.ncols()).map(|c| self.xbar[(g, c / jj)] * self.phi[(g, c % jj)]).collect()
    }

    /// `Σ_g w_g (e_j ⊗ Φ(z_g))`, the weighted column sum of group `j`'s
    /// pure rows, as a `dJ` vector.
    pub fn pure_weighted_sum(&self, j: usize, w: &[f64]) -> Vec<f64> {
        let jj = self.j();
        let mut out = vec![0.0; self.ncols()];
        for k in 0..jj {
            out[j * jj + k] = (0..self.m()).map(|g| w[g] * self.phi[(g, k)]).sum();
        }
        out
    }

    /// `γ(e_j, z_g) = Φ(z_g)ᵀ θ_j` for every `g`.
    pub fn eval_pure(&self, theta: &[f64], j: usize) -> Vec<f64> {
        let jj = self.j();
        let block = &theta[j * jj..(j + 1) * jj];
        crate::linalg::mat_vec(self.phi.as_ref(), block)
    }

    /// `γ(x̄_g, z_g) = Σ_j x̄_gj Φ(z_g)ᵀ θ_j` for every `g`.
    pub fn eval_design(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m()];
        for j in 0..self.d() {
            let pj = self.eval_pure(theta, j);
            for g in 0..self.m() {
                out[g] += self.xbar[(g, j)] * pj[g];
            }
        }
        out
    }
}

/// Interacts an evaluated basis with the dataset's shares.
pub fn interact(basis: FittedBasis, phi: Mat<f64>, data: &AggregateDataset) -> SieveDesign {
    assert_eq!(phi.nrows(), data.m());
    SieveDesign {
        basis,
        phi,
        xbar: data.xbar_matrix(),
    }
}
