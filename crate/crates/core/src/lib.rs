//! Debiased semiparametric ecological inference.
//!
//! Estimates group-level conditional means `E[Y | X = j]` when only
//! geography-level aggregates are observed: the mean outcome `ȳ_g`, the
//! group shares `x̄_g` on the simplex, covariates `z_g` and a population
//! size `n_g`. The outcome regression is restricted to the partially linear
//! class `η(z)ᵀx̄` and estimated with sieve ridge regression; a closed-form
//! Riesz representer supplies the debiasing correction.
//!
//! The crate is organised bottom-up:
//!
//! - [`dataset`]: aggregate records, CSV ingestion, size weights `u`.
//! - [`sieve`]: covariate scaling, basis families, interacted designs.
//! - [`ridge`]: SVD-backed ridge, closed-form LOOCV, bound-constrained fits.
//! - [`qp`]: the primal active-set quadratic program solver behind the
//!   bounded fits and the local projections.
//! - [`riesz`]: Riesz representer coefficients, `ν̂`, leave-one-out values.
//! - [`dml`]: the debiased estimator, score covariance, contrasts, and the
//!   Goodman regression baseline.
//! - [`local`]: per-geography estimates and confidence regions.
//! - [`sensitivity`]: bias bounds, robustness values, covariate benchmarks.
//! - [`synth`]: the truncated-Normal ecological data generator.
//! - [`harness`]: Monte Carlo benchmarking over synthetic replications.
//! - [`cli`]: the command-line front end.

pub mod cli;
pub mod dataset;
pub mod dml;
mod error;
pub mod harness;
pub mod linalg;
pub mod local;
pub mod qp;
pub mod ridge;
pub mod riesz;
pub mod sensitivity;
pub mod sieve;
pub mod synth;

pub use dataset::{AggregateDataset, CsvSchema, GeographyRecord, WeightVector};
pub use dml::{estimate, goodman, EstimateOptions, EstimateResult, GoodmanFit, NuisanceFit};
pub use error::{Error, Result};
pub use sieve::{BasisFamily, BasisSpec, SieveDesign};
