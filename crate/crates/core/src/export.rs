//! CSV and JSON artifacts of a fit, and reloading a saved fit.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::fmt_f64;
use crate::engines::{Engine, RawFit};
use crate::error::{Error, Result};
use crate::model::{state_moments, Hyperparameters, VariationalState};
use crate::postprocess::{OrthonormalizedFit, TrajectoryBand};
use crate::select::CandidateResult;
use crate::simulate::{GroundTruth, ReplicateRow};
use crate::splines::EvaluationGrid;

pub const FIT_FORMAT_VERSION: u32 = 1;

/// Everything needed to rebuild a [`RawFit`] without the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub format_version: u32,
    pub engine: Engine,
    pub ks: Vec<usize>,
    pub hyper: Hyperparameters,
    pub subject_ids: Vec<String>,
    pub variable_names: Vec<String>,
    pub time_range: (f64, f64),
    pub fingerprint: String,
    pub converged: bool,
    pub iterations: usize,
    pub elbo_trace: Vec<f64>,
    pub state: VariationalState,
}

impl FitDocument {
    pub fn from_raw(raw: &RawFit) -> Self {
        Self {
            format_version: FIT_FORMAT_VERSION,
            engine: raw.engine,
            ks: raw.ks.clone(),
            hyper: raw.hyper.clone(),
            subject_ids: raw.subject_ids.clone(),
            variable_names: raw.variable_names.clone(),
            time_range: raw.time_range,
            fingerprint: raw.fingerprint.clone(),
            converged: raw.converged,
            iterations: raw.iterations,
            elbo_trace: raw.elbo_trace.clone(),
            state: raw.state.clone(),
        }
    }

    /// Rebuilt fit; its cache has no data summaries and it carries no
    /// message store.
    pub fn into_raw(self) -> Result<RawFit> {
        if self.format_version != FIT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "fit format version {} is not supported (expected {FIT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let cache = state_moments(&self.state)?;
        Ok(RawFit {
            cache,
            state: self.state,
            elbo_trace: self.elbo_trace,
            converged: self.converged,
            iterations: self.iterations,
            engine: self.engine,
            fingerprint: self.fingerprint,
            ks: self.ks,
            hyper: self.hyper,
            subject_ids: self.subject_ids,
            variable_names: self.variable_names,
            time_range: self.time_range,
            messages: None,
        })
    }
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_fit(raw: &RawFit, path: impl AsRef<Path>) -> Result<()> {
    write_json(&FitDocument::from_raw(raw), path)
}

pub fn read_fit(path: impl AsRef<Path>) -> Result<RawFit> {
    read_json::<FitDocument>(path)?.into_raw()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn finish(mut w: csv::Writer<BufWriter<File>>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn original_time(t: f64, range: (f64, f64)) -> f64 {
    if range == (0.0, 1.0) {
        t
    } else {
        range.0 + t * (range.1 - range.0)
    }
}

/// `variable, t, mean` rows on the original time scale.
pub fn write_mean_csv(fit: &OrthonormalizedFit, time_range: (f64, f64), path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(["variable", "t", "mean"])?;
    for (j, name) in fit.variable_names.iter().enumerate() {
        for (g, &t) in fit.grid.t.iter().enumerate() {
            w.write_record([
                name.clone(),
                fmt_f64(original_time(t, time_range)),
                fmt_f64(fit.mean[j][g]),
            ])?;
        }
    }
    finish(w, path)
}

/// `variable, t, psi_1, ..., psi_L` rows on the original time scale.
pub fn write_eigenfunctions_csv(
    fit: &OrthonormalizedFit,
    time_range: (f64, f64),
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    let mut header = vec!["variable".to_string(), "t".to_string()];
    header.extend((1..=fit.l()).map(|l| format!("psi_{l}")));
    w.write_record(&header)?;
    let ng = fit.grid.len();
    for (j, name) in fit.variable_names.iter().enumerate() {
        for (g, &t) in fit.grid.t.iter().enumerate() {
            let mut rec = vec![name.clone(), fmt_f64(original_time(t, time_range))];
            rec.extend((0..fit.l()).map(|l| fmt_f64(fit.eigenfunctions[(j * ng + g, l)])));
            w.write_record(&rec)?;
        }
    }
    finish(w, path)
}

/// `subject, score_1, ..., score_L, sd_1, ..., sd_L`.
pub fn write_scores_csv(fit: &OrthonormalizedFit, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    let mut header = vec!["subject".to_string()];
    header.extend((1..=fit.l()).map(|l| format!("score_{l}")));
    header.extend((1..=fit.l()).map(|l| format!("sd_{l}")));
    w.write_record(&header)?;
    for (i, id) in fit.subject_ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(fit.scores.row(i).iter().map(|&v| fmt_f64(v)));
        rec.extend(fit.score_sd(i).iter().map(|&v| fmt_f64(v)));
        w.write_record(&rec)?;
    }
    finish(w, path)
}

pub fn write_elbo_csv(trace: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(["iteration", "elbo"])?;
    for (k, e) in trace.iter().enumerate() {
        w.write_record([(k + 1).to_string(), fmt_f64(*e)])?;
    }
    finish(w, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PveReport {
    pub eigenvalues: Vec<f64>,
    pub pve: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub near_zero: Vec<bool>,
    pub threshold: f64,
    pub selected_l: usize,
}

impl PveReport {
    pub fn new(fit: &OrthonormalizedFit, threshold: f64, selected_l: usize) -> Self {
        let cumulative = fit
            .pve
            .iter()
            .scan(0.0, |acc, v| {
                *acc += v;
                Some(*acc)
            })
            .collect();
        Self {
            eigenvalues: fit.eigenvalues.clone(),
            pve: fit.pve.clone(),
            cumulative,
            near_zero: fit.near_zero.clone(),
            threshold,
            selected_l,
        }
    }
}

/// `variable, t, estimate, lo95, hi95` for one subject.
pub fn write_trajectory_csv(
    bands: &[TrajectoryBand],
    variable_names: &[String],
    time_range: (f64, f64),
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(["variable", "t", "estimate", "lo95", "hi95"])?;
    for (band, name) in bands.iter().zip(variable_names) {
        for k in 0..band.t.len() {
            w.write_record([
                name.clone(),
                fmt_f64(original_time(band.t[k], time_range)),
                fmt_f64(band.estimate[k]),
                fmt_f64(band.lo95[k]),
                fmt_f64(band.hi95[k]),
            ])?;
        }
    }
    finish(w, path)
}

/// `k, l, elbo, posterior_prob, converged` per candidate; `k` joins the
/// per-variable values with `;`.
pub fn write_candidates_csv(results: &[CandidateResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(["k", "l", "elbo", "posterior_prob", "converged", "error"])?;
    for r in results {
        let ks: Vec<String> = r.candidate.ks.iter().map(|k| k.to_string()).collect();
        w.write_record([
            ks.join(";"),
            r.candidate.l.to_string(),
            fmt_f64(r.elbo),
            fmt_f64(r.probability),
            r.converged.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    finish(w, path)
}

pub fn write_replicates_csv(rows: &[ReplicateRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record([
        "replicate",
        "method",
        "variable",
        "component",
        "rmse",
        "ise",
        "mean_ise",
        "selected_l",
        "coverage",
        "ci_length",
        "converged",
        "runtime_s",
        "orthonormality_error",
        "reconstruction_error",
        "error",
    ])?;
    for r in rows {
        let method = match r.method {
            crate::simulate::Method::Multivariate => "multivariate",
            crate::simulate::Method::Univariate => "univariate",
        };
        w.write_record([
            r.replicate.to_string(),
            method.to_string(),
            r.variable.map(|j| j.to_string()).unwrap_or_default(),
            r.component.to_string(),
            fmt_f64(r.rmse),
            fmt_f64(r.ise),
            fmt_f64(r.mean_ise),
            r.selected_l.to_string(),
            fmt_f64(r.coverage),
            fmt_f64(r.ci_length),
            r.converged.to_string(),
            fmt_f64(r.runtime_s),
            fmt_f64(r.orthonormality_error),
            fmt_f64(r.reconstruction_error),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    finish(w, path)
}

/// Writes `truth_mean.csv`, `truth_eigenfunctions.csv` and `truth_scores.csv`
/// into `dir`; scores carry one row per subject and score-driving variable.
pub fn write_ground_truth(
    truth: &GroundTruth,
    subject_ids: &[String],
    variable_names: &[String],
    grid: &EvaluationGrid,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let paths = [
        dir.join("truth_mean.csv"),
        dir.join("truth_eigenfunctions.csv"),
        dir.join("truth_scores.csv"),
    ];
    let l = truth.l();

    let mut w = csv_writer(&paths[0])?;
    w.write_record(["variable", "t", "mean"])?;
    for (j, name) in variable_names.iter().enumerate() {
        for &t in &grid.t {
            w.write_record([name.clone(), fmt_f64(t), fmt_f64(truth.mean(j, t))])?;
        }
    }
    finish(w, &paths[0])?;

    let mut w = csv_writer(&paths[1])?;
    let mut header = vec!["variable".to_string(), "t".to_string()];
    header.extend((1..=l).map(|c| format!("psi_{c}")));
    w.write_record(&header)?;
    for (j, name) in variable_names.iter().enumerate() {
        for &t in &grid.t {
            let mut rec = vec![name.clone(), fmt_f64(t)];
            rec.extend((0..l).map(|c| fmt_f64(truth.eigenfunction(c, j, t))));
            w.write_record(&rec)?;
        }
    }
    finish(w, &paths[1])?;

    let mut w = csv_writer(&paths[2])?;
    let mut header = vec!["subject".to_string(), "variable".to_string()];
    header.extend((1..=l).map(|c| format!("zeta_{c}")));
    w.write_record(&header)?;
    let shared = truth.scores.len() == 1;
    for (k, z) in truth.scores.iter().enumerate() {
        let var = if shared {
            "*".to_string()
        } else {
            variable_names[k].clone()
        };
        for (i, id) in subject_ids.iter().enumerate() {
            let mut rec = vec![id.clone(), var.clone()];
            rec.extend((0..l).map(|c| fmt_f64(z[(i, c)])));
            w.write_record(&rec)?;
        }
    }
    finish(w, &paths[2])?;
    Ok(paths.to_vec())
}
