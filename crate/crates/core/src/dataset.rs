//! Aggregate records, CSV ingestion, and the size weights `u`.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shares are renormalized when their sum is off by at most this much.
pub const SHARE_RENORMALIZE_TOL: f64 = 1e-6;
/// Shares of a validated record sum to one within this tolerance.
pub const SHARE_SUM_TOL: f64 = 1e-9;
/// Default caller-facing threshold for the max-`u` diagnostic.
pub const DEFAULT_BND_THRESHOLD: f64 = 50.0;

/// One geography's aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeographyRecord {
    pub id: String,
    /// Outcome mean over the geography.
    pub ybar: f64,
    /// Group shares, on the simplex.
    pub xbar: Vec<f64>,
    /// Covariates.
    pub z: Vec<f64>,
    /// Population size.
    pub n: f64,
}

/// A validated collection of geography records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDataset")]
pub struct AggregateDataset {
    records: Vec<GeographyRecord>,
    group_names: Vec<String>,
    covariate_names: Vec<String>,
    /// Covariates that are 0/1 indicators and enter the sieve linearly.
    indicators: Vec<bool>,
    outcome_bounds: Option<[f64; 2]>,
}

#[derive(Deserialize)]
struct RawDataset {
    records: Vec<GeographyRecord>,
    group_names: Vec<String>,
    covariate_names: Vec<String>,
    #[serde(default)]
    indicators: Option<Vec<bool>>,
    #[serde(default)]
    outcome_bounds: Option<[f64; 2]>,
}

impl TryFrom<RawDataset> for AggregateDataset {
    type Error = Error;

    fn try_from(raw: RawDataset) -> Result<Self> {
        let p = raw.covariate_names.len();
        AggregateDataset::new(raw.records, raw.group_names, raw.covariate_names, raw.outcome_bounds)?
            .with_indicators(raw.indicators.unwrap_or_else(|| vec![false; p]))
    }
}

impl AggregateDataset {
    /// Validates and assembles a dataset.
    pub fn new(
        records: Vec<GeographyRecord>,
        group_names: Vec<String>,
        covariate_names: Vec<String>,
        outcome_bounds: Option<[f64; 2]>,
    ) -> Result<Self> {
        let d = group_names.len();
        let p = covariate_names.len();
        if d == 0 {
            return Err(Error::InvalidData("at least one group is required".into()));
        }
        if records.len() < 2 {
            return Err(Error::InvalidData(format!(
                "at least two records are required, got {}",
                records.len()
            )));
        }
        if let Some([lo, hi]) = outcome_bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidArgument(format!(
                    "outcome bounds must satisfy lo < hi, got [{lo}, {hi}]"
                )));
            }
        }
        for (row, r) in records.iter().enumerate() {
            validate_record(row, r, d, p, outcome_bounds)?;
        }
        Ok(Self {
            records,
            group_names,
            covariate_names,
            indicators: vec![false; p],
            outcome_bounds,
        })
    }

    /// Marks covariates as indicators (entered linearly by the sieve).
    pub fn with_indicators(mut self, indicators: Vec<bool>) -> Result<Self> {
        if indicators.len() != self.p() {
            return Err(Error::Dimension(format!(
                "{} indicator flags for {} covariates",
                indicators.len(),
                self.p()
            )));
        }
        self.indicators = indicators;
        Ok(self)
    }

    pub fn m(&self) -> usize {
        self.records.len()
    }

    pub fn d(&self) -> usize {
        self.group_names.len()
    }

    pub fn p(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn records(&self) -> &[GeographyRecord] {
        &self.records
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn indicators(&self) -> &[bool] {
        &self.indicators
    }

    pub fn outcome_bounds(&self) -> Option<[f64; 2]> {
        self.outcome_bounds
    }

    pub fn ybar(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.ybar).collect()
    }

    pub fn sizes(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.n).collect()
    }

    /// `m × d` matrix of shares.
    pub fn xbar_matrix(&self) -> Mat<f64> {
        Mat::from_fn(self.m(), self.d(), |g, j| self.records[g].xbar[j])
    }

    /// `m × p` matrix of covariates.
    pub fn z_matrix(&self) -> Mat<f64> {
        Mat::from_fn(self.m(), self.p(), |g, k| self.records[g].z[k])
    }

    /// Replaces every outcome, keeping the rest of the data.
    pub fn with_outcomes(&self, ybar: &[f64]) -> Result<Self> {
        if ybar.len() != self.m() {
            return Err(Error::Dimension(format!("{} outcomes for {} records", ybar.len(), self.m())));
        }
        let records = self
            .records
            .iter()
            .zip(ybar)
            .map(|(r, &y)| GeographyRecord { ybar: y, ..r.clone() })
            .collect();
        Self::new(records, self.group_names.clone(), self.covariate_names.clone(), self.outcome_bounds)?
            .with_indicators(self.indicators.clone())
    }

    /// Returns the dataset restricted to (and ordered by) `indices`.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        Self::new(records, self.group_names.clone(), self.covariate_names.clone(), self.outcome_bounds)?
            .with_indicators(self.indicators.clone())
    }

    /// Drops covariate `k`.
    pub fn drop_covariate(&self, k: usize) -> Result<Self> {
        if k >= self.p() {
            return Err(Error::InvalidArgument(format!("covariate index {k} out of range")));
        }
        let records = self
            .records
            .iter()
            .map(|r| {
                let mut z = r.z.clone();
                z.remove(k);
                GeographyRecord { z, ..r.clone() }
            })
            .collect();
        let mut names = self.covariate_names.clone();
        names.remove(k);
        let mut indicators = self.indicators.clone();
        indicators.remove(k);
        Self::new(records, self.group_names.clone(), names, self.outcome_bounds)?.with_indicators(indicators)
    }

    /// Appends a covariate column.
    pub fn with_covariate(&self, name: &str, values: &[f64], indicator: bool) -> Result<Self> {
        if values.len() != self.m() {
            return Err(Error::Dimension(format!("{} values for {} records", values.len(), self.m())));
        }
        let records = self
            .records
            .iter()
            .zip(values)
            .map(|(r, &v)| {
                let mut z = r.z.clone();
                z.push(v);
                GeographyRecord { z, ..r.clone() }
            })
            .collect();
        let mut names = self.covariate_names.clone();
        names.push(name.to_string());
        let mut indicators = self.indicators.clone();
        indicators.push(indicator);
        Self::new(records, self.group_names.clone(), names, self.outcome_bounds)?.with_indicators(indicators)
    }

    /// Sets or clears the declared outcome bounds, revalidating.
    pub fn with_bounds(&self, bounds: Option<[f64; 2]>) -> Result<Self> {
        Self::new(self.records.clone(), self.group_names.clone(), self.covariate_names.clone(), bounds)?
            .with_indicators(self.indicators.clone())
    }
}

fn validate_record(row: usize, r: &GeographyRecord, d: usize, p: usize, bounds: Option<[f64; 2]>) -> Result<()> {
    if r.xbar.len() != d {
        return Err(Error::Dimension(format!("row {row} has {} shares, expected {d}", r.xbar.len())));
    }
    if r.z.len() != p {
        return Err(Error::Dimension(format!("row {row} has {} covariates, expected {p}", r.z.len())));
    }
    if !r.ybar.is_finite() {
        return Err(Error::InvalidData(format!("non-finite outcome at row {row}")));
    }
    if let Some(k) = r.z.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidData(format!("non-finite covariate {k} at row {row}")));
    }
    if !(r.n > 0.0 && r.n.is_finite()) {
        return Err(Error::NonPositiveSize { row, n: r.n });
    }
    if let Some(j) = r.xbar.iter().position(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::InvalidData(format!(
            "share {j} at row {row} is {} and lies outside [0, 1]",
            r.xbar[j]
        )));
    }
    let sum: f64 = r.xbar.iter().sum();
    if (sum - 1.0).abs() > SHARE_SUM_TOL {
        return Err(Error::ShareSum { row, sum });
    }
    if let Some([lo, hi]) = bounds {
        if r.ybar < lo || r.ybar > hi {
            return Err(Error::InvalidData(format!(
                "outcome {} at row {row} lies outside the declared bounds [{lo}, {hi}]",
                r.ybar
            )));
        }
    }
    Ok(())
}

/// Column mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CsvSchema {
    pub outcome: String,
    pub shares: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Numeric covariates holding 0/1 indicators. Names not already listed
    /// in `covariates` are appended after them.
    #[serde(default)]
    pub indicators: Vec<String>,
    /// Categorical covariates, expanded to drop-first one-hot indicators.
    #[serde(default)]
    pub categorical: Vec<String>,
    /// Population size column; `n = 1` when absent.
    #[serde(default)]
    pub size: Option<String>,
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub bounds: Option<[f64; 2]>,
}

/// Reads a dataset from a CSV file.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<AggregateDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, schema)
}

/// Reads a dataset from any CSV source with a header row.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<AggregateDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let col = |name: &str| -> Result<usize> {
        index.get(name).copied().ok_or_else(|| Error::MissingColumn(name.to_string()))
    };

    if schema.shares.is_empty() {
        return Err(Error::InvalidArgument("at least one share column is required".into()));
    }
    let outcome = col(&schema.outcome)?;
    let shares = schema.shares.iter().map(|s| col(s)).collect::<Result<Vec<_>>>()?;
    let numeric: Vec<&String> = schema
        .covariates
        .iter()
        .chain(schema.indicators.iter().filter(|s| !schema.covariates.contains(s)))
        .collect();
    let numeric_idx = numeric.iter().map(|s| col(s)).collect::<Result<Vec<_>>>()?;
    let categorical_idx = schema.categorical.iter().map(|s| col(s)).collect::<Result<Vec<_>>>()?;
    let size = schema.size.as_deref().map(col).transpose()?;
    let id = schema.id.as_deref().map(col).transpose()?;

    let mut raw_rows = Vec::new();
    for row in rdr.records() {
        raw_rows.push(row?);
    }

    let parse = |column: &str, row: usize, value: &str| -> Result<f64> {
        value
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::NonNumeric {
                column: column.to_string(),
                row,
                value: value.to_string(),
            })
    };

    // Categorical levels, sorted; the first level is the reference.
    let levels: Vec<Vec<String>> = categorical_idx
        .iter()
        .zip(&schema.categorical)
        .map(|(&c, name)| {
            let mut set = BTreeSet::new();
            for (row, rec) in raw_rows.iter().enumerate() {
                let v = rec.get(c).unwrap_or("");
                if v.is_empty() {
                    return Err(Error::NonNumeric {
                        column: name.clone(),
                        row,
                        value: String::new(),
                    });
                }
                set.insert(v.to_string());
            }
            Ok(set.into_iter().collect())
        })
        .collect::<Result<_>>()?;

    let mut covariate_names: Vec<String> = numeric.iter().map(|s| s.to_string()).collect();
    let mut indicators: Vec<bool> = numeric.iter().map(|s| schema.indicators.contains(s)).collect();
    for (name, lv) in schema.categorical.iter().zip(&levels) {
        for level in lv.iter().skip(1) {
            covariate_names.push(format!("{name}={level}"));
            indicators.push(true);
        }
    }

    let mut records = Vec::with_capacity(raw_rows.len());
    for (row, rec) in raw_rows.iter().enumerate() {
        let field = |c: usize| rec.get(c).unwrap_or("");
        let ybar = parse(&schema.outcome, row, field(outcome))?;
        let mut xbar = shares
            .iter()
            .zip(&schema.shares)
            .map(|(&c, name)| parse(name, row, field(c)))
            .collect::<Result<Vec<_>>>()?;
        let sum: f64 = xbar.iter().sum();
        let dev = (sum - 1.0).abs();
        if dev > SHARE_RENORMALIZE_TOL || !sum.is_finite() {
            return Err(Error::ShareSum { row, sum });
        }
        if dev > SHARE_SUM_TOL {
            xbar.iter_mut().for_each(|x| *x /= sum);
        }
        let mut z = numeric_idx
            .iter()
            .zip(&numeric)
            .map(|(&c, name)| parse(name, row, field(c)))
            .collect::<Result<Vec<_>>>()?;
        for (&c, lv) in categorical_idx.iter().zip(&levels) {
            let v = field(c);
            z.extend(lv.iter().skip(1).map(|l| if l == v { 1.0 } else { 0.0 }));
        }
        let n = match size {
            Some(c) => parse(schema.size.as_deref().unwrap_or_default(), row, field(c))?,
            None => 1.0,
        };
        let id = id.map_or_else(|| (row + 1).to_string(), |c| field(c).to_string());
        records.push(GeographyRecord { id, ybar, xbar, z, n });
    }

    AggregateDataset::new(records, schema.shares.clone(), covariate_names, schema.bounds)?.with_indicators(indicators)
}

/// Writes a dataset as CSV and returns the schema that reads it back.
pub fn save_csv(data: &AggregateDataset, path: impl AsRef<Path>) -> Result<CsvSchema> {
    let file = std::fs::File::create(path.as_ref())?;
    write_csv(data, file)
}

/// Writes a dataset as CSV to any sink. Numbers use shortest round-trip
/// formatting, so reading the output back reproduces the data exactly.
pub fn write_csv<W: Write>(data: &AggregateDataset, writer: W) -> Result<CsvSchema> {
    let schema = schema_for(data);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), schema.outcome.clone()];
    header.extend(data.group_names.iter().cloned());
    header.extend(data.covariate_names.iter().cloned());
    header.push("n".to_string());
    w.write_record(&header)?;
    for r in &data.records {
        let mut fields = vec![r.id.clone(), r.ybar.to_string()];
        fields.extend(r.xbar.iter().map(f64::to_string));
        fields.extend(r.z.iter().map(f64::to_string));
        fields.push(r.n.to_string());
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(schema)
}

/// The schema matching [`write_csv`]'s layout for `data`.
pub fn schema_for(data: &AggregateDataset) -> CsvSchema {
    CsvSchema {
        outcome: "y".into(),
        shares: data.group_names.clone(),
        covariates: data.covariate_names.clone(),
        indicators: data
            .covariate_names
            .iter()
            .zip(&data.indicators)
            .filter(|(_, &flag)| flag)
            .map(|(n, _)| n.clone())
            .collect(),
        categorical: Vec::new(),
        size: Some("n".into()),
        id: Some("id".into()),
        bounds: data.outcome_bounds,
    }
}

/// Per-record weights `u_gj = n_g x̄_gj / mean_g(n_g x̄_gj)` for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub group: usize,
    pub values: Vec<f64>,
}

impl WeightVector {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Computes the size weights for group `j`.
pub fn compute_u(data: &AggregateDataset, j: usize) -> Result<WeightVector> {
    if j >= data.d() {
        return Err(Error::InvalidArgument(format!("group index {j} out of range (d = {})", data.d())));
    }
    let mass: Vec<f64> = data.records.iter().map(|r| r.n * r.xbar[j]).collect();
    let mean = mass.iter().sum::<f64>() / mass.len() as f64;
    if mean <= 0.0 {
        return Err(Error::GroupAbsent(j));
    }
    Ok(WeightVector {
        group: j,
        values: mass.into_iter().map(|v| v / mean).collect(),
    })
}

/// Weights for every group, in group order.
pub fn compute_all_u(data: &AggregateDataset) -> Result<Vec<WeightVector>> {
    (0..data.d()).map(|j| compute_u(data, j)).collect()
}

/// Largest `u_gj` over records for each group; `None` for absent groups.
/// Large values mean a few geographies dominate the group's estimand.
pub fn bnd_diagnostic(data: &AggregateDataset) -> Vec<Option<f64>> {
    (0..data.d()).map(|j| compute_u(data, j).ok().map(|u| u.max())).collect()
}
