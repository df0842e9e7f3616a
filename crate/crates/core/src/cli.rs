//! Command-line front end.
//!
//! Every command resolves its flags into a [`RunConfig`] first and then runs
//! from that config alone. Reports embed the config, so
//! `ecoinfer --config report.json` replays a run exactly.
//!
//! Exit codes: 0 on success, 1 for invalid input or flags, 2 for numerical
//! failures.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dataset::{self, CsvSchema};
use crate::dml::{self, EstimateOptions, EstimateResult, LambdaChoice, Weighting};
use crate::error::{Error, Result};
use crate::harness::{self, BenchmarkConfig, MethodSummary};
use crate::local::{self, ConditionalCovariance, LocalOptions};
use crate::sensitivity::{self, ContourGrid, GridSpec, SensitivityReport, SensitivityTarget};
use crate::sieve::{BasisFamily, BasisSpec};
use crate::synth::{self, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Fit,
    Local,
    Sensitivity,
    Simulate,
    Benchmark,
}

/// Output locations. `report: None` prints the JSON report to stdout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    pub report: Option<PathBuf>,
    pub local_csv: Option<PathBuf>,
    pub contour_csv: Option<PathBuf>,
    pub data_csv: Option<PathBuf>,
    pub truth_csv: Option<PathBuf>,
    pub summary_csv: Option<PathBuf>,
    pub raw_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySettings {
    pub target: SensitivityTarget,
    pub rho: f64,
    pub deltas: Option<Vec<f64>>,
    pub grid: GridSpec,
    pub benchmarks: bool,
}

/// Fully resolved run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub input: Option<PathBuf>,
    pub outputs: Outputs,
    pub schema: CsvSchema,
    pub estimate: EstimateOptions,
    pub local: LocalOptions,
    pub sensitivity: Option<SensitivitySettings>,
    pub synth: Option<SynthConfig>,
    pub reps: usize,
    pub threads: Option<usize>,
    pub goodman_weighted: bool,
}

#[derive(Debug, Parser)]
#[command(name = "ecoinfer", version, about = "Debiased ecological inference from aggregate data")]
pub struct Cli {
    /// Replay a run from a config or report JSON; other flags are ignored.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Option<Cmd>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Estimate the group means and write a JSON report.
    Fit {
        #[command(flatten)]
        fit: FitArgs,
        /// Also write local estimates to this CSV.
        #[arg(long)]
        local_csv: Option<PathBuf>,
        #[command(flatten)]
        local: LocalArgs,
    },
    /// Per-geography estimates and confidence intervals.
    Local {
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        local_csv: PathBuf,
        #[command(flatten)]
        local: LocalArgs,
    },
    /// Omitted-confounder bias bounds, robustness values, and benchmarks.
    Sensitivity {
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        sens: SensitivityArgs,
    },
    /// Write a synthetic dataset and its ground truth.
    Simulate {
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long)]
        data_csv: PathBuf,
        #[arg(long)]
        truth_csv: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Monte Carlo comparison with Goodman regression.
    Benchmark {
        #[command(flatten)]
        synth: SynthArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 200)]
        reps: usize,
        #[arg(long)]
        threads: Option<usize>,
        /// Weight the Goodman regression by population size.
        #[arg(long)]
        goodman_weighted: bool,
        #[arg(long)]
        summary_csv: Option<PathBuf>,
        #[arg(long)]
        raw_csv: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Input CSV.
    #[arg(short, long)]
    pub input: PathBuf,
    /// JSON report path; stdout when omitted.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub outcome: String,
    /// Comma-separated share columns, one per group.
    #[arg(long, value_delimiter = ',', required = true)]
    pub shares: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    /// Covariates holding 0/1 indicators.
    #[arg(long, value_delimiter = ',')]
    pub indicators: Vec<String>,
    /// Categorical covariates, one-hot encoded.
    #[arg(long, value_delimiter = ',')]
    pub categorical: Vec<String>,
    #[arg(long)]
    pub size: Option<String>,
    #[arg(long)]
    pub id: Option<String>,
    /// Declared outcome range, e.g. `--bounds 0 1`.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
    pub bounds: Option<Vec<f64>>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Sieve basis: intercept, linear, cosine:J, polynomial:DEG, spline:KNOTS.
    #[arg(long, default_value = "linear", value_parser = parse_basis)]
    pub basis: BasisSpec,
    /// Fixed penalty; LOOCV selects it when omitted.
    #[arg(long, conflicts_with = "lambda_grid")]
    pub lambda: Option<f64>,
    /// Comma-separated LOOCV grid.
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Vec<f64>,
    #[arg(long, value_enum, default_value_t = WeightingArg::Uniform)]
    pub weighting: WeightingArg,
    /// Do not constrain the outcome regression to the bounds.
    #[arg(long)]
    pub unbounded: bool,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WeightingArg {
    Uniform,
    Population,
}

#[derive(Debug, Args)]
pub struct LocalArgs {
    /// Miscoverage of the local regions.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Assume unimodal local errors and report one-dimensional intervals.
    #[arg(long)]
    pub unimodal: bool,
    /// Basis of the residual variance model.
    #[arg(long, default_value = "intercept", value_parser = parse_basis)]
    pub kappa_basis: BasisSpec,
    #[arg(long)]
    pub kappa_lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    /// Group name or zero-based index.
    #[arg(long, conflicts_with = "contrast")]
    pub group: Option<String>,
    /// Comma-separated contrast weights, e.g. "1,-1".
    #[arg(long, allow_hyphen_values = true)]
    pub contrast: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    /// Comma-separated bias levels for robustness values.
    #[arg(long, value_delimiter = ',')]
    pub deltas: Vec<f64>,
    /// Contour grid size as `N_GAMMAxN_ALPHA`.
    #[arg(long, default_value = "50x50", value_parser = parse_grid)]
    pub grid: (usize, usize),
    #[arg(long, default_value_t = 1.0)]
    pub c_gamma_max: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c_alpha_max: f64,
    /// Skip the per-covariate refits.
    #[arg(long)]
    pub no_benchmarks: bool,
    #[arg(long)]
    pub contour_csv: Option<PathBuf>,
}

/// Defaults reproduce the two-group confounded design.
#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub m: usize,
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    #[arg(long, default_value_t = 3)]
    pub p: usize,
    #[arg(long, default_value_t = 0.5)]
    pub r2_xz: f64,
    #[arg(long, default_value_t = 0.5)]
    pub r2_bz: f64,
    /// Comma-separated means of B; evenly spaced on [0.3, 0.7] by default.
    #[arg(long, value_delimiter = ',')]
    pub mu_b: Vec<f64>,
    /// `s` in `Σ_b = s (I + 11ᵀ)`.
    #[arg(long, default_value_t = 0.02)]
    pub sigma_b_scale: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

fn parse_basis(s: &str) -> std::result::Result<BasisSpec, String> {
    let (name, arg) = match s.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (s, None),
    };
    let count = || -> std::result::Result<usize, String> {
        arg.ok_or_else(|| format!("basis `{name}` needs a size, e.g. `{name}:10`"))?
            .parse()
            .map_err(|e| format!("bad basis size in `{s}`: {e}"))
    };
    let family = match name {
        "intercept" | "intercept_only" => BasisFamily::InterceptOnly,
        "linear" => BasisFamily::Linear,
        "cosine" => BasisFamily::Cosine { terms: count()? },
        "polynomial" => BasisFamily::Polynomial {
            max_degree: count()?,
            max_terms: None,
        },
        "spline" => BasisFamily::Spline {
            order: 4,
            interior_knots: count()?,
            max_terms: None,
        },
        other => return Err(format!("unknown basis `{other}`")),
    };
    Ok(BasisSpec::new(family))
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| format!("grid must look like 50x50, got `{s}`"))?;
    let a = a.trim().parse().map_err(|e| format!("bad grid size `{s}`: {e}"))?;
    let b = b.trim().parse().map_err(|e| format!("bad grid size `{s}`: {e}"))?;
    Ok((a, b))
}

fn parse_contrast(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("bad contrast weight `{v}`: {e}")))
        })
        .collect()
}

fn estimate_options(model: &ModelArgs) -> EstimateOptions {
    let mut opts = EstimateOptions::new(model.basis.clone());
    opts.lambda = match (model.lambda, model.lambda_grid.is_empty()) {
        (Some(lambda), _) => LambdaChoice::Fixed { lambda },
        (None, false) => LambdaChoice::Loocv {
            grid: model.lambda_grid.clone(),
        },
        (None, true) => LambdaChoice::default(),
    };
    opts.weighting = match model.weighting {
        WeightingArg::Uniform => Weighting::Uniform,
        WeightingArg::Population => Weighting::Population,
    };
    opts.bounded = !model.unbounded;
    opts.level = model.level;
    opts
}

fn schema(fit: &FitArgs) -> Result<CsvSchema> {
    let bounds = match fit.bounds.as_deref() {
        None => None,
        Some(&[lo, hi]) => Some([lo, hi]),
        Some(_) => return Err(Error::InvalidArgument("--bounds takes two values".into())),
    };
    Ok(CsvSchema {
        outcome: fit.outcome.clone(),
        shares: fit.shares.clone(),
        covariates: fit.covariates.clone(),
        indicators: fit.indicators.clone(),
        categorical: fit.categorical.clone(),
        size: fit.size.clone(),
        id: fit.id.clone(),
        bounds,
    })
}

fn local_options(args: &LocalArgs) -> LocalOptions {
    LocalOptions {
        kappa_basis: args.kappa_basis.clone(),
        kappa_lambda: args.kappa_lambda,
        alpha: args.alpha,
        unimodal: args.unimodal,
    }
}

fn synth_config(args: &SynthArgs) -> SynthConfig {
    let mut cfg = SynthConfig::study2(args.m, args.d, args.p, args.r2_xz, args.seed);
    cfg.r2_bz = args.r2_bz;
    if !args.mu_b.is_empty() {
        cfg.mu_b = args.mu_b.clone();
    }
    let s = args.sigma_b_scale;
    cfg.sigma_b = (0..args.d)
        .map(|i| (0..args.d).map(|k| if i == k { 2.0 * s } else { s }).collect())
        .collect();
    cfg
}

fn base_config(command: Command) -> RunConfig {
    RunConfig {
        command,
        input: None,
        outputs: Outputs::default(),
        schema: CsvSchema::default(),
        estimate: EstimateOptions::new(BasisSpec::linear()),
        local: LocalOptions::default(),
        sensitivity: None,
        synth: None,
        reps: 0,
        threads: None,
        goodman_weighted: false,
    }
}

fn with_fit(mut cfg: RunConfig, fit: &FitArgs) -> Result<RunConfig> {
    cfg.input = Some(fit.input.clone());
    cfg.outputs.report = fit.output.clone();
    cfg.schema = schema(fit)?;
    cfg.estimate = estimate_options(&fit.model);
    Ok(cfg)
}

/// Turns parsed flags into a run config. Group names in `--group` are
/// resolved later, against the data.
pub fn resolve(cmd: Cmd) -> Result<RunConfig> {
    match cmd {
        Cmd::Fit { fit, local_csv, local } => {
            let mut cfg = with_fit(base_config(Command::Fit), &fit)?;
            cfg.outputs.local_csv = local_csv;
            cfg.local = local_options(&local);
            Ok(cfg)
        }
        Cmd::Local { fit, local_csv, local } => {
            let mut cfg = with_fit(base_config(Command::Local), &fit)?;
            cfg.outputs.local_csv = Some(local_csv);
            cfg.local = local_options(&local);
            Ok(cfg)
        }
        Cmd::Sensitivity { fit, sens } => {
            let mut cfg = with_fit(base_config(Command::Sensitivity), &fit)?;
            let target = match (&sens.group, &sens.contrast) {
                (_, Some(c)) => SensitivityTarget::Contrast(parse_contrast(c)?),
                (Some(g), None) => match g.parse::<usize>() {
                    Ok(j) => SensitivityTarget::Group(j),
                    Err(_) => match cfg.schema.shares.iter().position(|s| s == g) {
                        Some(j) => SensitivityTarget::Group(j),
                        None => return Err(Error::InvalidArgument(format!("unknown group `{g}`"))),
                    },
                },
                (None, None) => SensitivityTarget::Group(0),
            };
            cfg.outputs.contour_csv = sens.contour_csv;
            cfg.sensitivity = Some(SensitivitySettings {
                target,
                rho: sens.rho,
                deltas: (!sens.deltas.is_empty()).then_some(sens.deltas),
                grid: GridSpec {
                    c_gamma: [0.0, sens.c_gamma_max],
                    c_alpha: [0.0, sens.c_alpha_max],
                    n_gamma: sens.grid.0,
                    n_alpha: sens.grid.1,
                },
                benchmarks: !sens.no_benchmarks,
            });
            Ok(cfg)
        }
        Cmd::Simulate {
            synth,
            data_csv,
            truth_csv,
            output,
        } => {
            let mut cfg = base_config(Command::Simulate);
            cfg.synth = Some(synth_config(&synth));
            cfg.outputs.data_csv = Some(data_csv);
            cfg.outputs.truth_csv = truth_csv;
            cfg.outputs.report = output;
            Ok(cfg)
        }
        Cmd::Benchmark {
            synth,
            model,
            reps,
            threads,
            goodman_weighted,
            summary_csv,
            raw_csv,
            output,
        } => {
            let mut cfg = base_config(Command::Benchmark);
            cfg.synth = Some(synth_config(&synth));
            cfg.estimate = estimate_options(&model);
            cfg.reps = reps;
            cfg.threads = threads;
            cfg.goodman_weighted = goodman_weighted;
            cfg.outputs.summary_csv = summary_csv;
            cfg.outputs.raw_csv = raw_csv;
            cfg.outputs.report = output;
            Ok(cfg)
        }
    }
}

/// Reads a config, accepting either a bare [`RunConfig`] or any report
/// that embeds one under `config`.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let value: serde_json::Value = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
    let inner = match value.get("config") {
        Some(c) => c.clone(),
        None => value,
    };
    Ok(serde_json::from_value(inner)?)
}

#[derive(Debug, Serialize)]
pub struct FitReport<'a> {
    pub config: &'a RunConfig,
    pub estimate: &'a EstimateResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditional_covariance: Option<&'a ConditionalCovariance>,
}

#[derive(Debug, Serialize)]
pub struct SensitivityOutput<'a> {
    pub config: &'a RunConfig,
    pub estimate: &'a EstimateResult,
    pub sensitivity: &'a SensitivityReport,
    pub contour: &'a ContourGrid,
}

#[derive(Debug, Serialize)]
pub struct SimulateReport<'a> {
    pub config: &'a RunConfig,
    pub beta_true: &'a [f64],
}

#[derive(Debug, Serialize)]
pub struct BenchmarkOutput<'a> {
    pub config: &'a RunConfig,
    pub summary: &'a [MethodSummary],
}

fn emit<T: Serialize>(report: &T, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = std::io::BufWriter::new(std::fs::File::create(p)?);
            serde_json::to_writer_pretty(&mut w, report)?;
            writeln!(w)?;
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            serde_json::to_writer_pretty(&mut w, report)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

fn input_data(cfg: &RunConfig) -> Result<dataset::AggregateDataset> {
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("no input file".into()))?;
    dataset::load_csv(input, &cfg.schema)
}

fn synth_of(cfg: &RunConfig) -> Result<&SynthConfig> {
    cfg.synth
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("config has no synthetic design".into()))
}

/// Runs a resolved config.
pub fn execute(cfg: &RunConfig) -> Result<()> {
    match cfg.command {
        Command::Fit | Command::Local => {
            let data = input_data(cfg)?;
            let (result, fit) = dml::estimate_full(&data, &cfg.estimate)?;
            let want_local = cfg.command == Command::Local || cfg.outputs.local_csv.is_some();
            let mut cov = None;
            if want_local {
                let (estimates, c) = local::local_estimates(&data, &fit, &cfg.local)?;
                if let Some(path) = &cfg.outputs.local_csv {
                    local::save_local_csv(&estimates, data.group_names(), path)?;
                }
                cov = Some(c);
            }
            emit(
                &FitReport {
                    config: cfg,
                    estimate: &result,
                    conditional_covariance: cov.as_ref(),
                },
                cfg.outputs.report.as_deref(),
            )
        }
        Command::Sensitivity => {
            let settings = cfg
                .sensitivity
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("config has no sensitivity settings".into()))?;
            let data = input_data(cfg)?;
            let (result, fit) = dml::estimate_full(&data, &cfg.estimate)?;
            let mut report = sensitivity::contrast_sensitivity(
                &data,
                &fit,
                &result,
                settings.target.clone(),
                settings.rho,
                settings.deltas.as_deref(),
            )?;
            if settings.benchmarks && data.p() > 0 {
                report.benchmarks = sensitivity::benchmark_covariates(&data, &fit, &cfg.estimate, &report)?;
            }
            let grid = sensitivity::contour_grid(&report, &settings.grid)?;
            if let Some(path) = &cfg.outputs.contour_csv {
                sensitivity::save_contour_csv(&grid, path)?;
            }
            emit(
                &SensitivityOutput {
                    config: cfg,
                    estimate: &result,
                    sensitivity: &report,
                    contour: &grid,
                },
                cfg.outputs.report.as_deref(),
            )
        }
        Command::Simulate => {
            let sd = synth::generate(synth_of(cfg)?)?;
            let data_path = cfg
                .outputs
                .data_csv
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("no data output path".into()))?;
            dataset::save_csv(&sd.data, data_path)?;
            if let Some(truth) = &cfg.outputs.truth_csv {
                sd.write_truth(std::io::BufWriter::new(std::fs::File::create(truth)?))?;
            }
            if let Some(path) = &cfg.outputs.report {
                emit(
                    &SimulateReport {
                        config: cfg,
                        beta_true: &sd.beta_true,
                    },
                    Some(path),
                )?;
            }
            Ok(())
        }
        Command::Benchmark => {
            let bench = BenchmarkConfig {
                synth: synth_of(cfg)?.clone(),
                reps: cfg.reps,
                options: cfg.estimate.clone(),
                goodman_weighted: cfg.goodman_weighted,
                threads: cfg.threads,
            };
            let report = harness::run_benchmark(&bench)?;
            if let Some(path) = &cfg.outputs.summary_csv {
                harness::save_benchmark(&report, path, cfg.outputs.raw_csv.as_deref())?;
            } else if let Some(raw) = &cfg.outputs.raw_csv {
                harness::write_replications_csv(&report, std::io::BufWriter::new(std::fs::File::create(raw)?))?;
            }
            emit(
                &BenchmarkOutput {
                    config: cfg,
                    summary: &report.summary,
                },
                cfg.outputs.report.as_deref(),
            )
        }
    }
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        1
    } else {
        2
    }
}

/// Parses `args`, runs, reports errors on stderr, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cfg = match (cli.config, cli.command) {
        (Some(path), _) => load_config(&path),
        (None, Some(cmd)) => resolve(cmd),
        (None, None) => Err(Error::InvalidArgument("a command or --config is required".into())),
    };
    match cfg.and_then(|c| execute(&c)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
