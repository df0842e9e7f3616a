//! C interface to `ecoinfer`.
//!
//! Every function returns an [`EcoStatus`]; on failure the message is
//! available from [`eco_last_error`] on the same thread. Datasets and fits
//! are opaque handles released with their `_free` functions. Matrices are
//! passed row-major. Strings returned through out-parameters are owned by
//! the caller and released with [`eco_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ecoinfer::dml::{self, EstimateOptions, EstimateResult, NuisanceFit};
use ecoinfer::local::{self, LocalOptions};
use ecoinfer::sensitivity::{self, SensitivityTarget};
use ecoinfer::synth::{self, SynthConfig};
use ecoinfer::{AggregateDataset, BasisSpec, CsvSchema, Error, GeographyRecord};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EcoStatus {
    Ok = 0,
    NullPointer = 1,
    /// Malformed input data, options, or arguments.
    InvalidInput = 2,
    Io = 3,
    /// The estimator failed numerically (rank deficiency, infeasible
    /// bounds, non-convergence).
    Numerical = 4,
    /// A caller buffer is too small.
    BufferTooSmall = 5,
    Panic = 6,
}

/// An aggregate dataset.
pub struct EcoDataset {
    inner: AggregateDataset,
}

/// A fitted estimator together with its nuisance regressions.
pub struct EcoFit {
    options: EstimateOptions,
    result: EstimateResult,
    nuisance: NuisanceFit,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(EcoStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io(_) => EcoStatus::Io,
            ref v if v.is_validation() => EcoStatus::InvalidInput,
            _ => EcoStatus::Numerical,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(EcoStatus::InvalidInput, format!("JSON error: {e}"))
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(EcoStatus::InvalidInput, msg.into())
}

fn null(name: &str) -> Failure {
    Failure(EcoStatus::NullPointer, format!("`{name}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EcoStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EcoStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal panic: {msg}"));
            EcoStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn as_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{name}` is not valid UTF-8")))
}

unsafe fn opt_str<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        as_str(p, name).map(Some)
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out(values: &[f64], out: *mut f64, len: usize, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(name));
    }
    if len < values.len() {
        return Err(Failure(
            EcoStatus::BufferTooSmall,
            format!("`{name}` holds {len} values, {} needed", values.len()),
        ));
    }
    std::ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

unsafe fn put<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(name));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| invalid("output contains a nul byte"))?;
    put(out, c.into_raw(), "out")
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn eco_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn eco_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn eco_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a dataset from arrays: `xbar` is `m × d`, `z` is `m × p` (may be
/// null when `p = 0`), `sizes` may be null for unit sizes. Outcome bounds
/// apply when `bounded` is true.
///
/// # Safety
/// Pointers must reference arrays of the stated lengths.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn eco_dataset_new(
    m: usize,
    d: usize,
    p: usize,
    ybar: *const f64,
    xbar: *const f64,
    z: *const f64,
    sizes: *const f64,
    bounded: bool,
    lower: f64,
    upper: f64,
    out: *mut *mut EcoDataset,
) -> EcoStatus {
    guard(|| {
        let ybar = slice(ybar, m, "ybar")?;
        let xbar = slice(xbar, m * d, "xbar")?;
        let z = slice(z, m * p, "z")?;
        let sizes = if sizes.is_null() { None } else { Some(slice(sizes, m, "sizes")?) };
        let records = (0..m)
            .map(|g| GeographyRecord {
                id: g.to_string(),
                ybar: ybar[g],
                xbar: xbar[g * d..(g + 1) * d].to_vec(),
                z: z[g * p..(g + 1) * p].to_vec(),
                n: sizes.map_or(1.0, |s| s[g]),
            })
            .collect();
        let inner = AggregateDataset::new(
            records,
            (0..d).map(|j| format!("group{j}")).collect(),
            (0..p).map(|k| format!("z{k}")).collect(),
            bounded.then_some([lower, upper]),
        )?;
        put(out, Box::into_raw(Box::new(EcoDataset { inner })), "out")
    })
}

/// Reads a dataset from a CSV file. `schema_json` describes the columns,
/// e.g. `{"outcome": "y", "shares": ["a", "b"], "covariates": ["z"]}`.
///
/// # Safety
/// String arguments must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn eco_dataset_read_csv(
    path: *const c_char,
    schema_json: *const c_char,
    out: *mut *mut EcoDataset,
) -> EcoStatus {
    guard(|| {
        let path = as_str(path, "path")?;
        let schema: CsvSchema = serde_json::from_str(as_str(schema_json, "schema_json")?)?;
        let inner = ecoinfer::dataset::load_csv(path, &schema)?;
        put(out, Box::into_raw(Box::new(EcoDataset { inner })), "out")
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `data` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn eco_dataset_free(data: *mut EcoDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Number of geographies, groups, and covariates.
///
/// # Safety
/// `data` must be a live handle; out-pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn eco_dataset_shape(
    data: *const EcoDataset,
    m: *mut usize,
    d: *mut usize,
    p: *mut usize,
) -> EcoStatus {
    guard(|| {
        let data = &as_ref(data, "data")?.inner;
        for (out, v) in [(m, data.m()), (d, data.d()), (p, data.p())] {
            if !out.is_null() {
                out.write(v);
            }
        }
        Ok(())
    })
}

/// Fits the estimator. `options_json` is a serialized set of estimation
/// options; null selects a linear sieve with LOOCV.
///
/// # Safety
/// `data` must be a live handle and `options_json` null or nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn eco_fit(
    data: *const EcoDataset,
    options_json: *const c_char,
    out: *mut *mut EcoFit,
) -> EcoStatus {
    guard(|| {
        let data = &as_ref(data, "data")?.inner;
        let options = match opt_str(options_json, "options_json")? {
            Some(s) => serde_json::from_str(s)?,
            None => EstimateOptions::new(BasisSpec::linear()),
        };
        let (result, nuisance) = dml::estimate_full(data, &options)?;
        put(
            out,
            Box::into_raw(Box::new(EcoFit {
                options,
                result,
                nuisance,
            })),
            "out",
        )
    })
}

/// Releases a fit. Null is ignored.
///
/// # Safety
/// `fit` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn eco_fit_free(fit: *mut EcoFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Number of groups in a fit.
///
/// # Safety
/// `fit` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn eco_fit_groups(fit: *const EcoFit, out: *mut usize) -> EcoStatus {
    guard(|| put(out, as_ref(fit, "fit")?.result.beta.len(), "out"))
}

/// Copies the `d` estimates into `out`.
///
/// # Safety
/// `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn eco_fit_beta(fit: *const EcoFit, out: *mut f64, len: usize) -> EcoStatus {
    guard(|| write_out(&as_ref(fit, "fit")?.result.beta, out, len, "out"))
}

/// Copies the `d` standard errors into `out`.
///
/// # Safety
/// `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn eco_fit_std_errors(fit: *const EcoFit, out: *mut f64, len: usize) -> EcoStatus {
    guard(|| write_out(&as_ref(fit, "fit")?.result.std_errors, out, len, "out"))
}

/// Copies the `d × d` covariance matrix, row-major, into `out`.
///
/// # Safety
/// `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn eco_fit_vcov(fit: *const EcoFit, out: *mut f64, len: usize) -> EcoStatus {
    guard(|| {
        let flat: Vec<f64> = as_ref(fit, "fit")?.result.vcov.iter().flatten().copied().collect();
        write_out(&flat, out, len, "out")
    })
}

/// The selected penalty.
///
/// # Safety
/// `fit` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn eco_fit_lambda(fit: *const EcoFit, out: *mut f64) -> EcoStatus {
    guard(|| put(out, as_ref(fit, "fit")?.result.diagnostics.lambda, "out"))
}

/// The full result as JSON.
///
/// # Safety
/// `fit` must be a live handle; free the string with [`eco_string_free`].
#[no_mangle]
pub unsafe extern "C" fn eco_fit_to_json(fit: *const EcoFit, out: *mut *mut c_char) -> EcoStatus {
    guard(|| {
        let json = serde_json::to_string(&as_ref(fit, "fit")?.result)?;
        put_string(out, json)
    })
}

fn check_pair(data: &AggregateDataset, fit: &EcoFit) -> Result<(), Failure> {
    if fit.nuisance.sieve.m() != data.m() || fit.result.beta.len() != data.d() {
        return Err(invalid("the fit was not produced from this dataset"));
    }
    Ok(())
}

/// Local estimates: `estimates`, `lower`, and `upper` receive `m × d`
/// values, row-major. Intervals are the projections of the confidence
/// region at level `alpha`.
///
/// # Safety
/// Handles must be live; buffers must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn eco_local_estimates(
    data: *const EcoDataset,
    fit: *const EcoFit,
    alpha: f64,
    unimodal: bool,
    estimates: *mut f64,
    lower: *mut f64,
    upper: *mut f64,
    len: usize,
) -> EcoStatus {
    guard(|| {
        let data = &as_ref(data, "data")?.inner;
        let fit = as_ref(fit, "fit")?;
        check_pair(data, fit)?;
        let opts = LocalOptions {
            alpha,
            unimodal,
            ..LocalOptions::default()
        };
        let (est, _) = local::local_estimates(data, &fit.nuisance, &opts)?;
        let b: Vec<f64> = est.iter().flat_map(|e| e.projection.b_hat_prime.clone()).collect();
        let lo: Vec<f64> = est.iter().flat_map(|e| e.intervals.iter().map(|i| i[0])).collect();
        let hi: Vec<f64> = est.iter().flat_map(|e| e.intervals.iter().map(|i| i[1])).collect();
        write_out(&b, estimates, len, "estimates")?;
        write_out(&lo, lower, len, "lower")?;
        write_out(&hi, upper, len, "upper")
    })
}

/// Sensitivity analysis of the contrast `Σ_j weights_j β_j`, with
/// covariate benchmarks when the data have covariates. Writes a JSON
/// report.
///
/// # Safety
/// Handles must be live and `weights` must hold `d` values.
#[no_mangle]
pub unsafe extern "C" fn eco_sensitivity(
    data: *const EcoDataset,
    fit: *const EcoFit,
    weights: *const f64,
    d: usize,
    rho: f64,
    out: *mut *mut c_char,
) -> EcoStatus {
    guard(|| {
        let data = &as_ref(data, "data")?.inner;
        let fit = as_ref(fit, "fit")?;
        check_pair(data, fit)?;
        let c = slice(weights, d, "weights")?.to_vec();
        let mut report = sensitivity::contrast_sensitivity(
            data,
            &fit.nuisance,
            &fit.result,
            SensitivityTarget::Contrast(c),
            rho,
            None,
        )?;
        if data.p() > 0 {
            report.benchmarks = sensitivity::benchmark_covariates(data, &fit.nuisance, &fit.options, &report)?;
        }
        put_string(out, serde_json::to_string(&report)?)
    })
}

/// The robustness value for bound scale `s` and bias threshold `delta`.
#[no_mangle]
pub extern "C" fn eco_robustness_value(s: f64, delta: f64, out: *mut f64) -> EcoStatus {
    guard(|| unsafe { put(out, sensitivity::robustness_value(s, delta)?, "out") })
}

/// The bias bound `rho · sigma · √nu · c_gamma · c_alpha`.
#[no_mangle]
pub extern "C" fn eco_bias_bound(
    sigma: f64,
    nu: f64,
    rho: f64,
    c_gamma: f64,
    c_alpha: f64,
    out: *mut f64,
) -> EcoStatus {
    guard(|| unsafe { put(out, sensitivity::bias_bound(sigma, nu, rho, c_gamma, c_alpha)?, "out") })
}

/// Generates a synthetic dataset. `config_json` is a serialized generator
/// configuration; null selects the two-group design with seed `seed`.
/// `beta_true` receives the `d` true group means when non-null.
///
/// # Safety
/// `config_json` must be null or nul-terminated; `beta_true` null or
/// holding `len` values.
#[no_mangle]
pub unsafe extern "C" fn eco_simulate(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut EcoDataset,
    beta_true: *mut f64,
    len: usize,
) -> EcoStatus {
    guard(|| {
        let config: SynthConfig = match opt_str(config_json, "config_json")? {
            Some(s) => serde_json::from_str(s)?,
            None => SynthConfig::study1(seed),
        };
        let sd = synth::generate(&config)?;
        if !beta_true.is_null() {
            write_out(&sd.beta_true, beta_true, len, "beta_true")?;
        }
        put(out, Box::into_raw(Box::new(EcoDataset { inner: sd.data })), "out")
    })
}
