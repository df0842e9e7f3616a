//! Monte Carlo comparison of the debiased estimator and Goodman regression
//! on synthetic data.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dml::{self, EstimateOptions};
use crate::error::{Error, Result};
use crate::linalg::normal_critical;
use crate::sieve::BasisSpec;
use crate::synth::{self, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Proposed,
    Goodman,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Proposed => "proposed",
            Self::Goodman => "goodman",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    /// Template; replication `r` uses seed `synth.seed + r`.
    pub synth: SynthConfig,
    pub reps: usize,
    pub options: EstimateOptions,
    #[serde(default)]
    pub goodman_weighted: bool,
    /// Worker threads; `None` uses the global pool.
    #[serde(default)]
    pub threads: Option<usize>,
}

impl BenchmarkConfig {
    /// Linear sieve with LOOCV, as in the standard comparison.
    pub fn new(synth: SynthConfig, reps: usize) -> Self {
        Self {
            synth,
            reps,
            options: EstimateOptions::new(BasisSpec::linear()),
            goodman_weighted: false,
            threads: None,
        }
    }
}

/// One method's output on one replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Replication {
    pub rep: usize,
    pub seed: u64,
    pub method: Method,
    pub estimate: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub truth: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    /// Root mean squared error per group, averaged over groups.
    pub rmse: f64,
    pub cover50: f64,
    pub cover95: f64,
    /// Mean wall time per fit.
    pub seconds: f64,
    pub replications: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub summary: Vec<MethodSummary>,
    #[serde(skip)]
    pub replications: Vec<Replication>,
}

fn run_one(cfg: &BenchmarkConfig, rep: usize) -> Result<Vec<Replication>> {
    let seed = cfg.synth.seed.wrapping_add(rep as u64);
    let sd = synth::generate(&cfg.synth.clone().with_seed(seed))?;
    let mut out = Vec::with_capacity(2);
    let start = Instant::now();
    match dml::estimate(&sd.data, &cfg.options) {
        Ok(res) => out.push(Replication {
            rep,
            seed,
            method: Method::Proposed,
            estimate: res.beta,
            std_errors: res.std_errors,
            truth: sd.beta_true.clone(),
            seconds: start.elapsed().as_secs_f64(),
        }),
        Err(e) => log::warn!("replication {rep}: proposed method failed: {e}"),
    }
    let start = Instant::now();
    match dml::goodman(&sd.data, cfg.goodman_weighted) {
        Ok(fit) => out.push(Replication {
            rep,
            seed,
            method: Method::Goodman,
            estimate: fit.coefficients,
            std_errors: fit.std_errors,
            truth: sd.beta_true,
            seconds: start.elapsed().as_secs_f64(),
        }),
        Err(e) => log::warn!("replication {rep}: Goodman regression failed: {e}"),
    }
    Ok(out)
}

/// Summary statistics for one method's replications.
pub fn summarize(method: Method, reps: &[Replication], expected: usize) -> MethodSummary {
    let rows: Vec<&Replication> = reps.iter().filter(|r| r.method == method).collect();
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.truth.len());
    let (z50, z95) = (normal_critical(0.5), normal_critical(0.95));
    let mut rmse = 0.0;
    let (mut c50, mut c95) = (0.0, 0.0);
    for j in 0..d {
        let mse = rows.iter().map(|r| (r.estimate[j] - r.truth[j]).powi(2)).sum::<f64>() / n as f64;
        rmse += mse.sqrt() / d as f64;
        let covered = |z: f64| {
            rows.iter()
                .filter(|r| (r.estimate[j] - r.truth[j]).abs() <= z * r.std_errors[j])
                .count() as f64
                / n as f64
        };
        c50 += covered(z50) / d as f64;
        c95 += covered(z95) / d as f64;
    }
    let seconds = rows.iter().map(|r| r.seconds).sum::<f64>() / n.max(1) as f64;
    MethodSummary {
        method,
        rmse: if n > 0 { rmse } else { f64::NAN },
        cover50: if n > 0 { c50 } else { f64::NAN },
        cover95: if n > 0 { c95 } else { f64::NAN },
        seconds,
        replications: n,
        failures: expected - n,
    }
}

/// Runs every replication (in parallel) and summarizes by method.
/// Results are ordered by replication index regardless of scheduling.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    if cfg.reps == 0 {
        return Err(Error::InvalidArgument("need at least one replication".into()));
    }
    let work = || -> Result<Vec<Replication>> {
        let per: Vec<Vec<Replication>> = (0..cfg.reps)
            .into_par_iter()
            .map(|r| run_one(cfg, r))
            .collect::<Result<_>>()?;
        Ok(per.into_iter().flatten().collect())
    };
    let replications = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let summary = [Method::Proposed, Method::Goodman]
        .into_iter()
        .map(|m| summarize(m, &replications, cfg.reps))
        .collect();
    Ok(BenchmarkReport {
        config: cfg.clone(),
        summary,
        replications,
    })
}

pub fn write_summary_csv<W: Write>(report: &BenchmarkReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "rmse", "cover50", "cover95", "seconds", "replications", "failures"])?;
    for s in &report.summary {
        w.write_record([
            s.method.name().to_string(),
            s.rmse.to_string(),
            s.cover50.to_string(),
            s.cover95.to_string(),
            s.seconds.to_string(),
            s.replications.to_string(),
            s.failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per replication, method, and group.
pub fn write_replications_csv<W: Write>(report: &BenchmarkReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["rep", "seed", "method", "group", "estimate", "std_error", "truth", "seconds"])?;
    for r in &report.replications {
        for j in 0..r.truth.len() {
            w.write_record([
                r.rep.to_string(),
                r.seed.to_string(),
                r.method.name().to_string(),
                j.to_string(),
                r.estimate[j].to_string(),
                r.std_errors[j].to_string(),
                r.truth[j].to_string(),
                r.seconds.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_benchmark(report: &BenchmarkReport, summary: impl AsRef<Path>, raw: Option<&Path>) -> Result<()> {
    write_summary_csv(report, std::io::BufWriter::new(std::fs::File::create(summary)?))?;
    if let Some(raw) = raw {
        write_replications_csv(report, std::io::BufWriter::new(std::fs::File::create(raw)?))?;
    }
    Ok(())
}
