//! Irregularly sampled multivariate functional data.
//!
//! A dataset holds, for every subject `i` and variable `j`, a series of
//! `(t, x)` pairs with strictly increasing times in `[0, 1]` and at least two
//! points. Every subject must be observed on every variable.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MIN_SERIES_LEN: usize = 2;

/// One subject's observations of one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
}

impl Series {
    pub fn new(t: Vec<f64>, x: Vec<f64>) -> Self {
        Self { t, x }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Sorts by time, keeping each value with its time.
    fn sort(&mut self) {
        let mut idx: Vec<usize> = (0..self.t.len()).collect();
        idx.sort_by(|&a, &b| self.t[a].total_cmp(&self.t[b]));
        self.t = idx.iter().map(|&k| self.t[k]).collect();
        self.x = idx.iter().map(|&k| self.x[k]).collect();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalDataset {
    subject_ids: Vec<String>,
    variable_names: Vec<String>,
    /// `series[i][j]`.
    series: Vec<Vec<Series>>,
    /// Original `(min, max)` of the time axis.
    time_range: (f64, f64),
}

impl FunctionalDataset {
    /// Validated dataset from already-normalized series.
    pub fn new(
        subject_ids: Vec<String>,
        variable_names: Vec<String>,
        mut series: Vec<Vec<Series>>,
        time_range: (f64, f64),
    ) -> Result<Self> {
        if series.len() != subject_ids.len() {
            return Err(Error::Shape(format!(
                "{} subject ids for {} subjects",
                subject_ids.len(),
                series.len()
            )));
        }
        if !(time_range.0.is_finite() && time_range.1.is_finite() && time_range.0 < time_range.1) {
            return Err(Error::Config(format!("invalid time range {time_range:?}")));
        }
        let p = variable_names.len();
        let mut problems = Vec::new();
        for (i, row) in series.iter_mut().enumerate() {
            if row.len() != p {
                return Err(Error::Shape(format!(
                    "subject {} has {} variables, expected {p}",
                    subject_ids[i],
                    row.len()
                )));
            }
            for (j, s) in row.iter_mut().enumerate() {
                let label = || format!("subject {} / variable {}", subject_ids[i], variable_names[j]);
                if s.t.len() != s.x.len() {
                    return Err(Error::Shape(format!(
                        "{}: {} times, {} values",
                        label(),
                        s.t.len(),
                        s.x.len()
                    )));
                }
                s.sort();
                if s.len() < MIN_SERIES_LEN {
                    problems.push(format!(
                        "{} has {} observation(s), need at least {MIN_SERIES_LEN}",
                        label(),
                        s.len()
                    ));
                }
                if s.t.iter().chain(&s.x).any(|v| !v.is_finite()) {
                    problems.push(format!("{} contains non-finite values", label()));
                }
                if s.t.iter().any(|t| !(0.0..=1.0).contains(t)) {
                    problems.push(format!("{} has times outside [0, 1]", label()));
                }
                if s.t.windows(2).any(|w| w[0] == w[1]) {
                    problems.push(format!("{} has duplicate timestamps", label()));
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(Self {
            subject_ids,
            variable_names,
            series,
            time_range,
        })
    }

    /// Dataset on the original time scale, normalized to `[0, 1]`.
    ///
    /// Times that already lie in `[0, 1]` are kept as they are (range
    /// `(0, 1)`); otherwise one affine map sends the dataset-wide minimum to
    /// 0 and maximum to 1.
    pub fn from_original_times(
        subject_ids: Vec<String>,
        variable_names: Vec<String>,
        mut series: Vec<Vec<Series>>,
    ) -> Result<Self> {
        let all = series.iter().flatten().flat_map(|s| s.t.iter().copied());
        let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)));
        let range = if lo >= 0.0 && hi <= 1.0 || !lo.is_finite() {
            (0.0, 1.0)
        } else if hi > lo {
            (lo, hi)
        } else {
            return Err(Error::Validation(vec![format!(
                "all observation times equal {lo}; cannot normalize"
            )]));
        };
        if range != (0.0, 1.0) {
            let w = range.1 - range.0;
            for s in series.iter_mut().flatten() {
                for t in s.t.iter_mut() {
                    *t = ((*t - range.0) / w).clamp(0.0, 1.0);
                }
            }
        }
        Self::new(subject_ids, variable_names, series, range)
    }

    pub fn n(&self) -> usize {
        self.series.len()
    }

    pub fn p(&self) -> usize {
        self.variable_names.len()
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    pub fn time_range(&self) -> (f64, f64) {
        self.time_range
    }

    pub fn series(&self, i: usize, j: usize) -> &Series {
        &self.series[i][j]
    }

    pub fn subject(&self, i: usize) -> &[Series] {
        &self.series[i]
    }

    /// `n_i^{(j)}` for every subject of variable `j`.
    pub fn counts(&self, j: usize) -> Vec<usize> {
        self.series.iter().map(|row| row[j].len()).collect()
    }

    /// `sum_i n_i^{(j)}`.
    pub fn total_count(&self, j: usize) -> usize {
        self.series.iter().map(|row| row[j].len()).sum()
    }

    /// Maps a normalized time back to the original scale.
    pub fn original_time(&self, t: f64) -> f64 {
        self.time_range.0 + t * (self.time_range.1 - self.time_range.0)
    }

    /// Re-applies normalization; a no-op on any constructed dataset.
    pub fn normalized(&self) -> Result<Self> {
        Self::from_original_times(
            self.subject_ids.clone(),
            self.variable_names.clone(),
            self.series.clone(),
        )
        .map(|mut d| {
            if d.time_range == (0.0, 1.0) {
                d.time_range = self.time_range;
            }
            d
        })
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.subject_ids.iter().position(|s| s == id)
    }

    /// The given subjects, in the given order.
    pub fn select_subjects(&self, idx: &[usize]) -> Result<Self> {
        Self::new(
            idx.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            self.variable_names.clone(),
            idx.iter().map(|&i| self.series[i].clone()).collect(),
            self.time_range,
        )
    }

    /// The given variables, in the given order.
    pub fn select_variables(&self, idx: &[usize]) -> Result<Self> {
        Self::new(
            self.subject_ids.clone(),
            idx.iter().map(|&j| self.variable_names[j].clone()).collect(),
            self.series
                .iter()
                .map(|row| idx.iter().map(|&j| row[j].clone()).collect())
                .collect(),
            self.time_range,
        )
    }

    /// Same design, every value multiplied by `c`.
    pub fn scale_values(&self, c: f64) -> Self {
        let mut out = self.clone();
        for s in out.series.iter_mut().flatten() {
            for x in s.x.iter_mut() {
                *x *= c;
            }
        }
        out
    }

    /// Content hash over labels, times and values (hex SHA-256).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.subject_ids {
            h.update(id.as_bytes());
            h.update([0u8]);
        }
        for v in &self.variable_names {
            h.update(v.as_bytes());
            h.update([0u8]);
        }
        for s in self.series.iter().flatten() {
            h.update((s.len() as u64).to_le_bytes());
            for v in s.t.iter().chain(&s.x) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Header names of the four long-format columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnConfig {
    pub subject: String,
    pub variable: String,
    pub time: String,
    pub value: String,
}

impl Default for ColumnConfig {
    fn default() -> Self {
        Self {
            subject: "subject".into(),
            variable: "variable".into(),
            time: "time".into(),
            value: "value".into(),
        }
    }
}

/// Reads a long-format CSV (one observation per row).
///
/// Subjects and variables keep their order of first appearance.
pub fn load_long_csv(path: impl AsRef<Path>, config: &ColumnConfig) -> Result<FunctionalDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column '{name}' not found in header of {}", path.display())))
    };
    let cols = [
        find(&config.subject)?,
        find(&config.variable)?,
        find(&config.time)?,
        find(&config.value)?,
    ];

    let mut subjects: Vec<String> = Vec::new();
    let mut variables: Vec<String> = Vec::new();
    let mut subject_pos: HashMap<String, usize> = HashMap::new();
    let mut variable_pos: HashMap<String, usize> = HashMap::new();
    let mut obs: Vec<(usize, usize, f64, f64)> = Vec::new();
    for (k, record) in reader.records().enumerate() {
        // header is row 1
        let row = k + 2;
        let record = record?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let number = |c: usize, what: &str| {
            field(c).parse::<f64>().map_err(|_| Error::Parse {
                row,
                message: format!("{what} '{}' is not a number", field(c)),
            })
        };
        let t = number(cols[2], "time")?;
        let x = number(cols[3], "value")?;
        if !t.is_finite() || !x.is_finite() {
            return Err(Error::Parse {
                row,
                message: "non-finite time or value".into(),
            });
        }
        let i = *subject_pos.entry(field(cols[0]).to_string()).or_insert_with(|| {
            subjects.push(field(cols[0]).to_string());
            subjects.len() - 1
        });
        let j = *variable_pos.entry(field(cols[1]).to_string()).or_insert_with(|| {
            variables.push(field(cols[1]).to_string());
            variables.len() - 1
        });
        obs.push((i, j, t, x));
    }

    let mut series = vec![vec![Series::new(Vec::new(), Vec::new()); variables.len()]; subjects.len()];
    for (i, j, t, x) in obs {
        series[i][j].t.push(t);
        series[i][j].x.push(x);
    }
    FunctionalDataset::from_original_times(subjects, variables, series)
}

/// Formats with 17 significant digits so values round-trip exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the long format read by [`load_long_csv`], on the original time scale.
pub fn write_long_csv(data: &FunctionalDataset, path: impl AsRef<Path>, config: &ColumnConfig) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record([&config.subject, &config.variable, &config.time, &config.value])?;
    for (i, row) in data.series.iter().enumerate() {
        for (j, s) in row.iter().enumerate() {
            for (t, x) in s.t.iter().zip(&s.x) {
                w.write_record([
                    data.subject_ids[i].as_str(),
                    data.variable_names[j].as_str(),
                    &fmt_f64(data.original_time(*t)),
                    &fmt_f64(*x),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Observation-count summary of one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSummary {
    pub name: String,
    pub median: f64,
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n: usize,
    pub p: usize,
    pub variables: Vec<VariableSummary>,
    pub failures: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn median(values: &[usize]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m] as f64
    } else {
        0.5 * (v[m - 1] + v[m]) as f64
    }
}

/// Summaries and invariant checks; failures are reported, never raised.
pub fn validate(data: &FunctionalDataset) -> ValidationReport {
    let mut failures = Vec::new();
    if data.n() == 0 {
        failures.push("dataset has no subjects".to_string());
    }
    if data.p() == 0 {
        failures.push("dataset has no variables".to_string());
    }
    let variables = (0..data.p())
        .map(|j| {
            let counts = data.counts(j);
            VariableSummary {
                name: data.variable_names[j].clone(),
                median: median(&counts),
                min: counts.iter().copied().min().unwrap_or(0),
                max: counts.iter().copied().max().unwrap_or(0),
            }
        })
        .collect();
    for (i, row) in data.series.iter().enumerate() {
        for (j, s) in row.iter().enumerate() {
            let ok = s.len() >= MIN_SERIES_LEN
                && s.t.windows(2).all(|w| w[0] < w[1])
                && s.t.iter().all(|t| (0.0..=1.0).contains(t))
                && s.t.iter().chain(&s.x).all(|v| v.is_finite());
            if !ok {
                failures.push(format!(
                    "subject {} / variable {} violates series invariants",
                    data.subject_ids[i], data.variable_names[j]
                ));
            }
        }
    }
    ValidationReport {
        n: data.n(),
        p: data.p(),
        variables,
        failures,
    }
}
