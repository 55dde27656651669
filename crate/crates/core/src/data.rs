//! Domain types and CSV ingestion.
//!
//! Dataset files use the header `f0,...,f{d-1},t,cost,revenue,propensity`.
//! On load, more than one revenue column may sit between `cost` and
//! `propensity` (e.g. `ov,gmv`); one is selected per run. The propensity
//! column may be omitted for RCT data, in which case the empirical arm
//! frequency is used.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

const PROPENSITY_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: line {line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("line {line}: {msg}")]
    Row { line: u64, msg: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid treatment set: {0}")]
    Treatments(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Ordered set of M discrete treatments; index 0 is control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TreatmentSetRepr", into = "TreatmentSetRepr")]
pub struct TreatmentSet {
    values: Vec<f64>,
    labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TreatmentSetRepr {
    values: Vec<f64>,
    labels: Vec<String>,
}

impl TryFrom<TreatmentSetRepr> for TreatmentSet {
    type Error = DataError;
    fn try_from(r: TreatmentSetRepr) -> Result<Self, DataError> {
        TreatmentSet::new(r.values, r.labels)
    }
}

impl From<TreatmentSet> for TreatmentSetRepr {
    fn from(t: TreatmentSet) -> Self {
        TreatmentSetRepr { values: t.values, labels: t.labels }
    }
}

impl TreatmentSet {
    pub fn new(values: Vec<f64>, labels: Vec<String>) -> Result<Self, DataError> {
        if values.len() < 2 {
            return Err(DataError::Treatments(format!("need at least 2 treatments, got {}", values.len())));
        }
        if labels.len() != values.len() {
            return Err(DataError::Treatments(format!(
                "{} labels for {} values",
                labels.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Treatments("non-finite treatment value".into()));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DataError::Treatments("values must be strictly increasing".into()));
        }
        Ok(TreatmentSet { values, labels })
    }

    /// Treatments labelled by their value.
    pub fn from_values(values: Vec<f64>) -> Result<Self, DataError> {
        let labels = values.iter().map(|v| format!("{v}")).collect();
        Self::new(values, labels)
    }

    /// M evenly spaced treatments with values 0..M-1.
    pub fn ordinal(m: usize) -> Result<Self, DataError> {
        Self::from_values((0..m).map(|j| j as f64).collect())
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Treatment value rescaled to `[0, 1]`; control maps to 0.
    pub fn normalized(&self, arm: usize) -> f64 {
        let lo = self.values[0];
        let hi = self.values[self.values.len() - 1];
        (self.values[arm] - lo) / (hi - lo)
    }

    /// Treatment value divided by the largest value, in `[0, 1]` when all
    /// values are nonnegative. Unlike [`normalized`](Self::normalized) a
    /// nonzero control value stays nonzero. Falls back to `normalized` when
    /// any value is negative.
    pub fn scaled(&self, arm: usize) -> f64 {
        let hi = self.values[self.values.len() - 1];
        if self.values[0] < 0.0 || hi <= 0.0 {
            return self.normalized(arm);
        }
        self.values[arm] / hi
    }
}

/// One logged unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub treatment: usize,
    pub cost: f64,
    pub revenue: f64,
    pub propensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Rct,
    Obs,
}

/// A validated collection of samples sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    kind: DatasetKind,
    treatments: TreatmentSet,
    feature_dim: usize,
}

impl Dataset {
    /// Validates every invariant; an `Ok` dataset is internally consistent.
    pub fn new(
        samples: Vec<Sample>,
        kind: DatasetKind,
        treatments: TreatmentSet,
        feature_dim: usize,
    ) -> Result<Self, DataError> {
        if feature_dim == 0 {
            return Err(DataError::Invalid("feature dimension must be positive".into()));
        }
        let m = treatments.count();
        for (i, s) in samples.iter().enumerate() {
            let row = |msg: String| DataError::Invalid(format!("row {i}: {msg}"));
            if s.features.len() != feature_dim {
                return Err(row(format!("{} features, expected {feature_dim}", s.features.len())));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(row("non-finite feature".into()));
            }
            if s.treatment >= m {
                return Err(row(format!("treatment {} out of range [0, {m})", s.treatment)));
            }
            if !(s.cost >= 0.0 && s.cost.is_finite()) {
                return Err(row(format!("cost {} must be finite and >= 0", s.cost)));
            }
            if !s.revenue.is_finite() {
                return Err(row("non-finite revenue".into()));
            }
            if !(s.propensity > 0.0 && s.propensity <= 1.0) {
                return Err(row(format!("propensity {} outside (0, 1]", s.propensity)));
            }
        }
        if kind == DatasetKind::Rct {
            check_rct_propensities(&samples, m)?;
        }
        Ok(Dataset { samples, kind, treatments, feature_dim })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn treatments(&self) -> &TreatmentSet {
        &self.treatments
    }

    pub fn num_treatments(&self) -> usize {
        self.treatments.count()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn features(&self) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.features.as_slice()).collect()
    }

    /// Subset by sample indices, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let samples = idx.iter().map(|&i| self.samples[i].clone()).collect();
        Dataset {
            samples,
            kind: self.kind,
            treatments: self.treatments.clone(),
            feature_dim: self.feature_dim,
        }
    }

    /// Per-arm sample counts.
    pub fn arm_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_treatments()];
        for s in &self.samples {
            counts[s.treatment] += 1;
        }
        counts
    }

    /// Mean logged cost per arm (0 for empty arms).
    pub fn arm_cost_means(&self) -> Vec<f64> {
        let m = self.num_treatments();
        let mut sums = vec![0.0; m];
        for s in &self.samples {
            sums[s.treatment] += s.cost;
        }
        sums.iter()
            .zip(self.arm_counts())
            .map(|(s, n)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect()
    }
}

fn check_rct_propensities(samples: &[Sample], m: usize) -> Result<(), DataError> {
    let mut per_arm: Vec<Option<f64>> = vec![None; m];
    for (i, s) in samples.iter().enumerate() {
        match per_arm[s.treatment] {
            None => per_arm[s.treatment] = Some(s.propensity),
            Some(p) if (p - s.propensity).abs() > 1e-12 => {
                return Err(DataError::Invalid(format!(
                    "row {i}: RCT propensity {} differs from {} for arm {}",
                    s.propensity, p, s.treatment
                )))
            }
            _ => {}
        }
    }
    if per_arm.iter().all(Option::is_some) {
        let total: f64 = per_arm.iter().flatten().sum();
        if (total - 1.0).abs() > PROPENSITY_SUM_TOL {
            return Err(DataError::Invalid(format!("RCT arm propensities sum to {total}, expected 1")));
        }
    }
    Ok(())
}

/// Per-unit decision: one treatment index per cluster or individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub choice: Vec<usize>,
    pub expected_revenue: f64,
    pub expected_cost: f64,
}

impl Assignment {
    pub fn validate(&self, m: usize) -> Result<(), DataError> {
        match self.choice.iter().position(|&c| c >= m) {
            Some(i) => Err(DataError::Invalid(format!("choice {i} = {} out of range [0, {m})", self.choice[i]))),
            None => Ok(()),
        }
    }
}

/// Options for [`load_dataset_with`].
#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub kind: DatasetKind,
    /// Which revenue column to use when the file carries several.
    pub revenue_column: String,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { kind: DatasetKind::Rct, revenue_column: "revenue".into() }
    }
}

/// Loads an RCT dataset with the default single `revenue` column.
pub fn load_dataset(path: &Path, treatments: &TreatmentSet) -> Result<Dataset, DataError> {
    load_dataset_with(path, treatments, &LoadOptions::default())
}

struct Layout {
    dim: usize,
    t: usize,
    cost: usize,
    revenue: usize,
    propensity: Option<usize>,
}

fn parse_header(header: &csv::StringRecord, revenue_column: &str) -> Result<Layout, String> {
    let names: Vec<&str> = header.iter().collect();
    let dim = names.iter().enumerate().take_while(|(i, n)| **n == format!("f{i}")).count();
    if dim == 0 {
        return Err("header must start with f0".into());
    }
    let expect = |i: usize, name: &str| -> Result<(), String> {
        match names.get(i) {
            Some(n) if *n == name => Ok(()),
            Some(n) => Err(format!("column {i}: expected `{name}`, found `{n}`")),
            None => Err(format!("missing column `{name}`")),
        }
    };
    expect(dim, "t")?;
    expect(dim + 1, "cost")?;
    let tail = &names[dim + 2..];
    let (revenue_cols, propensity) = match tail.last() {
        Some(&"propensity") => (&tail[..tail.len() - 1], Some(names.len() - 1)),
        _ => (tail, None),
    };
    if revenue_cols.is_empty() {
        return Err("missing revenue column".into());
    }
    let revenue = revenue_cols
        .iter()
        .position(|n| *n == revenue_column)
        .ok_or_else(|| format!("revenue column `{revenue_column}` not found"))?;
    Ok(Layout { dim, t: dim, cost: dim + 1, revenue: dim + 2 + revenue, propensity })
}

pub fn load_dataset_with(path: &Path, treatments: &TreatmentSet, opts: &LoadOptions) -> Result<Dataset, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io { path: path.into(), source })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let parse_err = |line: u64, msg: String| DataError::Parse { path: path.into(), line, msg };

    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let layout = parse_header(&header, &opts.revenue_column).map_err(|m| parse_err(1, m))?;
    if layout.propensity.is_none() && opts.kind == DatasetKind::Obs {
        return Err(parse_err(1, "observational data requires a propensity column".into()));
    }

    let m = treatments.count();
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let num = |col: usize| -> Result<f64, DataError> {
            let field = record.get(col).unwrap_or("");
            field
                .trim()
                .parse::<f64>()
                .map_err(|_| parse_err(line, format!("column `{}`: cannot parse `{field}`", &header[col])))
        };
        let features = (0..layout.dim).map(num).collect::<Result<Vec<_>, _>>()?;
        let t_field = record.get(layout.t).unwrap_or("").trim();
        let treatment: usize = t_field
            .parse()
            .map_err(|_| parse_err(line, format!("column `t`: cannot parse `{t_field}` as a treatment index")))?;
        if treatment >= m {
            return Err(DataError::Row { line, msg: format!("treatment {treatment} out of range [0, {m})") });
        }
        let propensity = match layout.propensity {
            Some(col) => {
                let p = num(col)?;
                if !(p > 0.0 && p <= 1.0) {
                    return Err(DataError::Row { line, msg: format!("propensity {p} outside (0, 1]") });
                }
                p
            }
            None => f64::NAN,
        };
        samples.push(Sample { features, treatment, cost: num(layout.cost)?, revenue: num(layout.revenue)?, propensity });
    }

    if layout.propensity.is_none() {
        let mut counts = vec![0usize; m];
        for s in &samples {
            counts[s.treatment] += 1;
        }
        let n = samples.len() as f64;
        for s in &mut samples {
            s.propensity = counts[s.treatment] as f64 / n;
        }
    }
    Dataset::new(samples, opts.kind, treatments.clone(), layout.dim)
}

/// Writes the dataset as CSV. Reals use the shortest representation that
/// parses back to the identical `f64`, so output is deterministic and
/// `load_dataset` inverts it exactly.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let io = |source| DataError::Io { path: path.into(), source };
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    let mut header: Vec<String> = (0..dataset.feature_dim()).map(|i| format!("f{i}")).collect();
    header.extend(["t", "cost", "revenue", "propensity"].map(String::from));
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    let mut line = String::new();
    for s in dataset.samples() {
        line.clear();
        for v in &s.features {
            line.push_str(&format!("{v:?},"));
        }
        line.push_str(&format!("{},{:?},{:?},{:?}", s.treatment, s.cost, s.revenue, s.propensity));
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}
