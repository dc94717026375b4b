//! Multisets of uncertainty data points, η-vicinity empirical probabilities
//! and extraction of the probable data set `D_α`.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    EmptyData,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionError { expected: usize, got: usize },
    #[error("component {component} of row {row} is flagged int but holds {value}")]
    NotInteger {
        row: usize,
        component: usize,
        value: f64,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Component kind of an uncertainty vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Int,
    Float,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kind::Int => f.write_str("int"),
            Kind::Float => f.write_str("float"),
        }
    }
}

/// Norm used to measure the η-vicinity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    L2,
    Linf,
}

impl Norm {
    /// Whether `‖a − b‖ ≤ eta`. L2 compares squared distances.
    pub fn within(self, a: &[f64], b: &[f64], eta: f64) -> bool {
        match self {
            Norm::L2 => {
                let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                sq <= eta * eta
            }
            Norm::Linf => a.iter().zip(b).all(|(x, y)| (x - y).abs() <= eta),
        }
    }
}

/// One realization of the uncertain vector ξ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DataPoint {
    pub values: Vec<f64>,
}

impl DataPoint {
    pub fn new(values: Vec<f64>) -> Self {
        // -0.0 and 0.0 are the same scenario
        let values = values.into_iter().map(|v| v + 0.0).collect();
        DataPoint { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Bit-exact identity key used for scenario equality.
    pub fn key(&self) -> Vec<u64> {
        self.values.iter().map(|v| v.to_bits()).collect()
    }
}

impl From<Vec<f64>> for DataPoint {
    fn from(values: Vec<f64>) -> Self {
        DataPoint::new(values)
    }
}

/// A finite multiset of data points. Duplicates are kept and order is
/// significant for reproducibility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSet {
    points: Vec<DataPoint>,
    kinds: Vec<Kind>,
    names: Vec<String>,
}

impl DataSet {
    /// All-continuous dataset of dimension `dim`.
    pub fn new(dim: usize, points: Vec<DataPoint>) -> Result<Self, DataError> {
        Self::with_kinds(vec![Kind::Float; dim], points)
    }

    pub fn with_kinds(kinds: Vec<Kind>, points: Vec<DataPoint>) -> Result<Self, DataError> {
        let names = (1..=kinds.len()).map(|i| format!("xi{i}")).collect();
        Self::with_schema(names, kinds, points)
    }

    pub fn with_schema(
        names: Vec<String>,
        kinds: Vec<Kind>,
        points: Vec<DataPoint>,
    ) -> Result<Self, DataError> {
        if names.len() != kinds.len() {
            return Err(DataError::DimensionError {
                expected: names.len(),
                got: kinds.len(),
            });
        }
        for (row, p) in points.iter().enumerate() {
            if p.dim() != kinds.len() {
                return Err(DataError::DimensionError {
                    expected: kinds.len(),
                    got: p.dim(),
                });
            }
            for (component, (&v, kind)) in p.values.iter().zip(&kinds).enumerate() {
                if !v.is_finite() || (*kind == Kind::Int && v.fract() != 0.0) {
                    return Err(DataError::NotInteger {
                        row,
                        component,
                        value: v,
                    });
                }
            }
        }
        Ok(DataSet {
            points,
            kinds,
            names,
        })
    }

    /// Convenience constructor from raw rows; all components continuous.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, DataError> {
        let dim = rows.first().map_or(0, |r| r.len());
        Self::new(dim, rows.iter().map(|r| DataPoint::new(r.to_vec())).collect())
    }

    pub fn dim(&self) -> usize {
        self.kinds.len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[DataPoint] {
        &self.points
    }

    pub fn kinds(&self) -> &[Kind] {
        &self.kinds
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Same schema, different points.
    pub fn with_points(&self, points: Vec<DataPoint>) -> DataSet {
        DataSet {
            points,
            kinds: self.kinds.clone(),
            names: self.names.clone(),
        }
    }

    /// SHA-256 over the dimension and the little-endian bytes of every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim() as u64).to_le_bytes());
        for p in &self.points {
            for v in &p.values {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let csv_err = |line: usize, e: csv::Error| DataError::Csv {
            line,
            message: e.to_string(),
        };
        let names: Vec<String> = rdr
            .headers()
            .map_err(|e| csv_err(1, e))?
            .iter()
            .map(str::to_owned)
            .collect();
        if names.is_empty() || names.iter().all(|n| n.is_empty()) {
            return Err(DataError::Csv {
                line: 1,
                message: "missing header row".into(),
            });
        }
        let mut kinds = vec![Kind::Float; names.len()];
        let mut points = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| csv_err(line, e))?;
            if i == 0 && rec.iter().all(|f| f == "int" || f == "float") {
                kinds = rec
                    .iter()
                    .map(|f| if f == "int" { Kind::Int } else { Kind::Float })
                    .collect();
                continue;
            }
            if rec.len() != names.len() {
                return Err(DataError::Csv {
                    line,
                    message: format!("expected {} fields, found {}", names.len(), rec.len()),
                });
            }
            let values = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| DataError::Csv {
                        line,
                        message: format!("not a number: {f:?}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            points.push(DataPoint::new(values));
        }
        Self::with_schema(names, kinds, points)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    /// Writes the header, the kind row, then one row per point.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| DataError::Io(std::io::Error::other(e));
        w.write_record(&self.names).map_err(io)?;
        w.write_record(self.kinds.iter().map(Kind::to_string))
            .map_err(io)?;
        for p in &self.points {
            w.write_record(p.values.iter().zip(&self.kinds).map(|(v, k)| match k {
                Kind::Int => format!("{}", *v as i64),
                Kind::Float => format!("{v}"),
            }))
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Distinct scenarios of a dataset with their multiplicities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub scenarios: Vec<DataPoint>,
    pub counts: Vec<usize>,
}

impl ScenarioSet {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Subset by index, in the given order; counts are carried along.
    pub fn select(&self, indices: &[usize]) -> ScenarioSet {
        ScenarioSet {
            scenarios: indices.iter().map(|&i| self.scenarios[i].clone()).collect(),
            counts: indices.iter().map(|&i| self.counts[i]).collect(),
        }
    }

    pub fn position(&self, point: &DataPoint) -> Option<usize> {
        let key = point.key();
        self.scenarios.iter().position(|s| s.key() == key)
    }
}

/// The underlying set `U[d]`: distinct points in first-occurrence order.
pub fn underlying_set(d: &DataSet) -> Result<ScenarioSet, DataError> {
    if d.is_empty() {
        return Err(DataError::EmptyData);
    }
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut out = ScenarioSet {
        scenarios: Vec::new(),
        counts: Vec::new(),
    };
    for p in d.points() {
        match index.get(&p.key()) {
            Some(&i) => out.counts[i] += 1,
            None => {
                index.insert(p.key(), out.scenarios.len());
                out.scenarios.push(p.clone());
                out.counts.push(1);
            }
        }
    }
    Ok(out)
}

fn check_eta(eta: f64) -> Result<(), DataError> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(DataError::InvalidParameter(format!(
            "eta must be positive and finite, got {eta}"
        )))
    }
}

fn vicinity_count(d: &DataSet, query: &[f64], eta: f64, norm: Norm) -> usize {
    d.points()
        .iter()
        .filter(|p| norm.within(&p.values, query, eta))
        .count()
}

/// Fraction of points of `d` (with multiplicity) inside the η-ball around `query`.
pub fn empirical_probability(
    d: &DataSet,
    query: &DataPoint,
    eta: f64,
    norm: Norm,
) -> Result<f64, DataError> {
    if query.dim() != d.dim() {
        return Err(DataError::DimensionError {
            expected: d.dim(),
            got: query.dim(),
        });
    }
    check_eta(eta)?;
    if d.is_empty() {
        return Err(DataError::EmptyData);
    }
    Ok(vicinity_count(d, &query.values, eta, norm) as f64 / d.len() as f64)
}

/// Probable data set: every point whose η-vicinity holds at least `alpha·D`
/// points. Multiplicity and order of the input are preserved.
pub fn build_d_alpha(d: &DataSet, alpha: f64, eta: f64, norm: Norm) -> Result<DataSet, DataError> {
    if d.is_empty() {
        return Err(DataError::EmptyData);
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DataError::InvalidParameter(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    check_eta(eta)?;
    let total = d.len() as f64;
    // count / D ≥ α rather than count ≥ α·D: the quotient is correctly
    // rounded, so decimal thresholds like 0.3 with D = 10 behave as written.
    let keep: Vec<bool> = d
        .points()
        .par_iter()
        .map(|p| vicinity_count(d, &p.values, eta, norm) as f64 / total >= alpha)
        .collect();
    let points = d
        .points()
        .iter()
        .zip(keep)
        .filter(|&(_, k)| k)
        .map(|(p, _)| p.clone())
        .collect();
    Ok(d.with_points(points))
}

/// Rule-of-thumb bandwidth `c · D^(−1/(u+4)) · σ̄`, where σ̄ is the mean of the
/// per-component sample standard deviations. Only used when asked for.
pub fn eta_rule_of_thumb(d: &DataSet, c: f64) -> Result<f64, DataError> {
    if d.len() < 2 {
        return Err(DataError::InvalidParameter(
            "rule-of-thumb bandwidth needs at least two points".into(),
        ));
    }
    let n = d.len() as f64;
    let u = d.dim();
    let mut sigma_sum = 0.0;
    for j in 0..u {
        let mean = d.points().iter().map(|p| p.values[j]).sum::<f64>() / n;
        let var = d
            .points()
            .iter()
            .map(|p| (p.values[j] - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        sigma_sum += var.sqrt();
    }
    let eta = c * n.powf(-1.0 / (u as f64 + 4.0)) * sigma_sum / u as f64;
    check_eta(eta).map(|_| eta)
}
