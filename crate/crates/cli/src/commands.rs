use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::Serialize;

use mfpca::dataset::{load_long_csv, validate, write_long_csv, FunctionalDataset};
use mfpca::engines::{fit as run_engine, Engine, RawFit};
use mfpca::export::{
    read_fit, write_candidates_csv, write_eigenfunctions_csv, write_elbo_csv, write_fit, write_ground_truth,
    write_json, write_mean_csv, write_replicates_csv, write_scores_csv, write_trajectory_csv, PveReport,
};
use mfpca::model::Hyperparameters;
use mfpca::postprocess::{orthonormalize_on, predict_trajectory};
use mfpca::select::{rule_of_thumb_k, select as run_selection, select_l_pve, KStrategy, LStrategy, SelectionConfig};
use mfpca::simulate::{
    generate_dataset, median_f64, run_replicates, ReplicateConfig, ReplicateRow, SimulationScenario,
};
use mfpca::splines::{bases_for, EvaluationGrid};

use crate::args::{BenchArgs, FitArgs, KArg, PredictArgs, SelectArgs, SimulateArgs};
use crate::manifest::{prepare_out_dir, RunManifest};
use crate::{Failure, Status};

pub const FIT_FILE: &str = "fit.json";

fn load(
    input: &Path,
    columns: &crate::args::ColumnArgs,
    manifest: &mut RunManifest,
) -> Result<FunctionalDataset, Failure> {
    let data = manifest.time("load", || load_long_csv(input, &columns.config()))?;
    let report = validate(&data);
    if !report.is_valid() {
        return Err(Failure::invalid(format!(
            "invalid dataset: {}",
            report.failures.join("; ")
        )));
    }
    manifest
        .input_fingerprints
        .insert(input.display().to_string(), data.fingerprint());
    log::info!(
        "loaded {} subjects and {} variables from {}",
        data.n(),
        data.p(),
        input.display()
    );
    Ok(data)
}

fn spline_counts(requested: &[usize], p: usize) -> Result<Vec<usize>, Failure> {
    match requested.len() {
        1 => Ok(vec![requested[0]; p]),
        n if n == p => Ok(requested.to_vec()),
        n => Err(Failure::invalid(format!(
            "--num-splines needs 1 or {p} values, got {n}"
        ))),
    }
}

pub fn fit(args: &FitArgs) -> Result<Status, Failure> {
    let hyper = args.model.hyperparameters()?;
    let mut manifest = RunManifest::new("fit", args, hyper.seed);
    let engine = Engine::from(args.model.engine);
    if !(args.pve_threshold > 0.0 && args.pve_threshold <= 1.0) {
        return Err(Failure::invalid(format!(
            "--pve-threshold must lie in (0, 1], got {}",
            args.pve_threshold
        )));
    }
    let grid = EvaluationGrid::new(args.grid_size)?;
    let data = load(&args.input, &args.columns, &mut manifest)?;

    let mut candidates = Vec::new();
    let ks = match (&args.num_splines, args.select_k) {
        (Some(k), _) => spline_counts(k, data.p())?,
        (None, KArg::Rule) => rule_of_thumb_k(&data),
        (None, KArg::Model) => {
            let config = SelectionConfig {
                k_min: args.k_min,
                k_max: args.k_max,
                l_max: hyper.l,
                pve_threshold: args.pve_threshold,
                k_strategy: KStrategy::ModelChoice,
                l_strategy: LStrategy::Pve,
                ..Default::default()
            };
            let selection = manifest.time("select_k", || run_selection(&data, &config, &hyper, engine))?;
            candidates = selection.candidates;
            selection.ks
        }
    };
    let bases = bases_for(&ks)?;
    prepare_out_dir(&args.out)?;
    let raw = manifest.time("fit", || run_engine(engine, &data, &bases, &hyper))?;
    let elbo_path = args.out.join("elbo.csv");
    write_elbo_csv(&raw.elbo_trace, &elbo_path)?;
    manifest.output(&args.out, &elbo_path);

    let status = if raw.converged {
        Status::Ok
    } else {
        Status::NotConverged
    };
    if !raw.converged {
        let note = format!("no convergence within {} iterations", raw.iterations);
        log::warn!("{note}");
        manifest.notes.push(note);
        if !args.allow_nonconverged {
            manifest.status = status as u8;
            manifest.write(&args.out)?;
            return Ok(status);
        }
    }

    let full = manifest.time("orthonormalize", || orthonormalize_on(&raw, &bases, &grid))?;
    let l = select_l_pve(&full, args.pve_threshold);
    let kept = full.truncated(l)?;
    log::info!("K = {ks:?}, kept {l} of {} components", full.l());

    let out = &args.out;
    let mut written = Vec::new();
    let path = out.join("mean.csv");
    write_mean_csv(&kept, raw.time_range, &path)?;
    written.push(path);
    let path = out.join("eigenfunctions.csv");
    write_eigenfunctions_csv(&kept, raw.time_range, &path)?;
    written.push(path);
    let path = out.join("scores.csv");
    write_scores_csv(&kept, &path)?;
    written.push(path);
    let path = out.join("pve.json");
    write_json(&PveReport::new(&full, args.pve_threshold, l), &path)?;
    written.push(path);
    let path = out.join(FIT_FILE);
    write_fit(&raw, &path)?;
    written.push(path);
    if !candidates.is_empty() {
        let path = out.join("candidates.csv");
        write_candidates_csv(&candidates, &path)?;
        written.push(path);
    }
    for p in &written {
        manifest.output(out, p);
    }
    manifest.status = status as u8;
    manifest.write(out)?;
    Ok(status)
}

#[derive(Serialize)]
struct SelectionSummary {
    ks: Vec<usize>,
    l: usize,
}

pub fn select(args: &SelectArgs) -> Result<Status, Failure> {
    let hyper = args.model.hyperparameters()?;
    let mut manifest = RunManifest::new("select", args, hyper.seed);
    let config = SelectionConfig {
        k_min: args.k_min,
        k_max: args.k_max,
        l_min: args.l_min,
        l_max: hyper.l,
        pve_threshold: args.pve_threshold,
        k_strategy: args.select_k.into(),
        l_strategy: args.select_l.into(),
    };
    config.validate()?;
    let data = load(&args.input, &args.columns, &mut manifest)?;
    let engine = Engine::from(args.model.engine);
    let selection = manifest.time("select", || run_selection(&data, &config, &hyper, engine))?;

    prepare_out_dir(&args.out)?;
    let out = &args.out;
    let mut written = Vec::new();
    if !selection.candidates.is_empty() {
        let path = out.join("candidates.csv");
        write_candidates_csv(&selection.candidates, &path)?;
        written.push(path);
    }
    if let Some((_, ofit)) = &selection.fit {
        let path = out.join("pve.json");
        write_json(&PveReport::new(ofit, args.pve_threshold, selection.l), &path)?;
        written.push(path);
    }
    let path = out.join("selection.json");
    write_json(
        &SelectionSummary {
            ks: selection.ks.clone(),
            l: selection.l,
        },
        &path,
    )?;
    written.push(path);
    for p in &written {
        manifest.output(out, p);
    }
    manifest.write(out)?;
    println!("K = {:?}, L = {}", selection.ks, selection.l);
    Ok(Status::Ok)
}

/// File-name-safe form of a subject id.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn requested_subjects(raw: &RawFit, spec: &str) -> Result<Vec<usize>, Failure> {
    if spec.trim() == "all" {
        return Ok((0..raw.n()).collect());
    }
    let mut idx = Vec::new();
    let mut unknown = Vec::new();
    for id in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match raw.subject_ids.iter().position(|s| s == id) {
            Some(i) => idx.push(i),
            None => unknown.push(id.to_string()),
        }
    }
    if !unknown.is_empty() {
        return Err(Failure::invalid(format!(
            "unknown subject(s) {}; valid ids: {}",
            unknown.join(", "),
            raw.subject_ids.join(", ")
        )));
    }
    if idx.is_empty() {
        return Err(Failure::invalid("no subjects requested"));
    }
    Ok(idx)
}

pub fn predict(args: &PredictArgs) -> Result<Status, Failure> {
    let mut manifest = RunManifest::new("predict", args, args.seed);
    let fit_path = args.fit.join(FIT_FILE);
    let raw = manifest.time("load", || read_fit(&fit_path))?;
    manifest
        .input_fingerprints
        .insert(fit_path.display().to_string(), raw.fingerprint.clone());
    let subjects = requested_subjects(&raw, &args.subjects)?;
    if args.samples < 2 {
        return Err(Failure::invalid("--samples must be at least 2"));
    }
    let grid = EvaluationGrid::new(args.grid_size)?;
    let bases = bases_for(&raw.ks)?;

    prepare_out_dir(&args.out)?;
    let mut used = HashSet::new();
    let start = std::time::Instant::now();
    for &i in &subjects {
        let bands = predict_trajectory(&raw, &bases, i, &grid.t, args.samples, args.seed)?;
        let mut stem = file_stem(&raw.subject_ids[i]);
        if !used.insert(stem.clone()) {
            stem = format!("{stem}_{}", i + 1);
            used.insert(stem.clone());
        }
        let path = args.out.join(format!("trajectory_{stem}.csv"));
        write_trajectory_csv(&bands, &raw.variable_names, raw.time_range, &path)?;
        manifest.output(&args.out, &path);
    }
    manifest
        .timings_s
        .insert("predict".into(), start.elapsed().as_secs_f64());
    manifest.write(&args.out)?;
    Ok(Status::Ok)
}

fn scenario_from(path: Option<&Path>) -> Result<SimulationScenario, Failure> {
    let sc = match path {
        Some(p) => SimulationScenario::from_json_file(p)?,
        None => SimulationScenario::default(),
    };
    sc.validate()?;
    Ok(sc)
}

pub fn simulate(args: &SimulateArgs) -> Result<Status, Failure> {
    let mut sc = scenario_from(args.scenario.as_deref())?;
    if let Some(seed) = args.seed {
        sc.seed = seed;
    }
    let mut manifest = RunManifest::new("simulate", args, sc.seed);
    let grid = EvaluationGrid::new(args.grid_size)?;
    let (data, truth) = manifest.time("generate", || generate_dataset(&sc))?;

    prepare_out_dir(&args.out)?;
    let out = &args.out;
    let path = out.join("data.csv");
    write_long_csv(&data, &path, &args.columns.config())?;
    manifest.output(out, &path);
    for p in write_ground_truth(&truth, data.subject_ids(), data.variable_names(), &grid, out)? {
        manifest.output(out, &p);
    }
    let path = out.join("scenario.json");
    write_json(&sc, &path)?;
    manifest.output(out, &path);
    manifest
        .input_fingerprints
        .insert("data.csv".into(), data.fingerprint());
    manifest.write(out)?;
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct BenchSummary {
    method: mfpca::simulate::Method,
    variable: Option<usize>,
    component: usize,
    replicates: usize,
    failed: usize,
    median_rmse: f64,
    median_ise: f64,
    mean_coverage: f64,
    mean_ci_length: f64,
}

fn summarize(rows: &[ReplicateRow]) -> Vec<BenchSummary> {
    let mut groups: BTreeMap<(u8, usize, usize), Vec<&ReplicateRow>> = BTreeMap::new();
    for r in rows {
        let m = match r.method {
            mfpca::simulate::Method::Multivariate => 0,
            mfpca::simulate::Method::Univariate => 1,
        };
        groups
            .entry((m, r.variable.unwrap_or(0), r.component))
            .or_default()
            .push(r);
    }
    let mean = |v: Vec<f64>| {
        let v: Vec<f64> = v.into_iter().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    groups
        .into_values()
        .map(|g| BenchSummary {
            method: g[0].method,
            variable: g[0].variable,
            component: g[0].component,
            replicates: g.len(),
            failed: g.iter().filter(|r| r.error.is_some()).count(),
            median_rmse: median_f64(&g.iter().map(|r| r.rmse).collect::<Vec<_>>()),
            median_ise: median_f64(&g.iter().map(|r| r.ise).collect::<Vec<_>>()),
            mean_coverage: mean(g.iter().map(|r| r.coverage).collect()),
            mean_ci_length: mean(g.iter().map(|r| r.ci_length).collect()),
        })
        .collect()
}

pub fn bench(args: &BenchArgs) -> Result<Status, Failure> {
    let sc = scenario_from(args.scenario.as_deref())?;
    let hyper: Hyperparameters = args.model.hyperparameters()?;
    if args.replicates == 0 {
        return Err(Failure::invalid("--replicates must be at least 1"));
    }
    if args.methods.is_empty() {
        return Err(Failure::invalid("--methods needs at least one method"));
    }
    let config = ReplicateConfig {
        engine: args.model.engine.into(),
        hyper,
        pve_threshold: args.pve_threshold,
        k: args.num_splines,
        grid_size: args.grid_size,
    };
    let mut manifest = RunManifest::new("bench", args, sc.seed);
    let methods: Vec<_> = args.methods.iter().map(|&m| m.into()).collect();
    let rows = manifest.time("replicates", || run_replicates(&sc, &methods, args.replicates, &config))?;

    prepare_out_dir(&args.out)?;
    let out = &args.out;
    let path = out.join("results.csv");
    write_replicates_csv(&rows, &path)?;
    manifest.output(out, &path);
    let path = out.join("summary.json");
    write_json(&summarize(&rows), &path)?;
    manifest.output(out, &path);
    let path = out.join("scenario.json");
    write_json(&sc, &path)?;
    manifest.output(out, &path);

    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    let status = if failed == rows.len() {
        Status::Numerical
    } else {
        Status::Ok
    };
    if failed > 0 {
        manifest
            .notes
            .push(format!("{failed} of {} rows come from failed fits", rows.len()));
    }
    manifest.status = status as u8;
    manifest.write(out)?;
    Ok(status)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_stems_are_path_safe() {
        assert_eq!(file_stem("s0001"), "s0001");
        assert_eq!(file_stem("a/b c.d"), "a_b_c_d");
    }

    #[test]
    fn spline_counts_broadcast_or_match() {
        assert_eq!(spline_counts(&[8], 3).unwrap(), vec![8, 8, 8]);
        assert_eq!(spline_counts(&[5, 6], 2).unwrap(), vec![5, 6]);
        assert!(spline_counts(&[5, 6], 3).is_err());
    }
}
