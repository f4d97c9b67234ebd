//! Choice of the spline dimension `K` and the number of components `L`.

use serde::{Deserialize, Serialize};

use crate::dataset::{median, FunctionalDataset};
use crate::engines::{fit, Engine, RawFit};
use crate::error::{Error, Result};
use crate::model::Hyperparameters;
use crate::postprocess::{orthonormalize_on, OrthonormalizedFit};
use crate::splines::{bases_for, EvaluationGrid, DEFAULT_GRID_SIZE, MIN_SPLINES};

pub const RULE_OF_THUMB_MIN: usize = 7;
pub const RULE_OF_THUMB_MAX: usize = 40;

/// `K_j = max(min(floor(median_i n_ij / 4), 40), 7)` for every variable.
pub fn rule_of_thumb_k(data: &FunctionalDataset) -> Vec<usize> {
    (0..data.p()).map(|j| k_from_median(median(&data.counts(j)))).collect()
}

pub fn k_from_median(median_obs: f64) -> usize {
    let q = (median_obs / 4.0).floor().max(0.0) as usize;
    q.min(RULE_OF_THUMB_MAX).max(RULE_OF_THUMB_MIN)
}

/// `exp(e - max e)` normalized; invariant to shifting every ELBO.
pub fn posterior_probabilities(elbos: &[f64]) -> Vec<f64> {
    let max = elbos
        .iter()
        .copied()
        .filter(|e| e.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return vec![0.0; elbos.len()];
    }
    let w: Vec<f64> = elbos
        .iter()
        .map(|&e| if e.is_finite() { (e - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|v| v / z).collect()
}

/// Smallest `L` whose cumulative PVE reaches `threshold`; `pve.len()` if none does.
pub fn l_from_pve(pve: &[f64], threshold: f64) -> usize {
    let mut acc = 0.0;
    for (l, v) in pve.iter().enumerate() {
        acc += v;
        // rounding in the shares must not push an exact 1.0 below the threshold
        if acc >= threshold - 1e-12 {
            return l + 1;
        }
    }
    pve.len().max(1)
}

pub fn select_l_pve(fit: &OrthonormalizedFit, threshold: f64) -> usize {
    l_from_pve(&fit.pve, threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KStrategy {
    RuleOfThumb,
    ModelChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LStrategy {
    Pve,
    ModelChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub l_min: usize,
    pub l_max: usize,
    pub pve_threshold: f64,
    pub k_strategy: KStrategy,
    pub l_strategy: LStrategy,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            k_min: 5,
            k_max: 20,
            l_min: 1,
            l_max: 10,
            pve_threshold: 0.95,
            k_strategy: KStrategy::RuleOfThumb,
            l_strategy: LStrategy::Pve,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.k_min > self.k_max {
            bad.push(format!("k_min {} exceeds k_max {}", self.k_min, self.k_max));
        }
        if self.k_min < MIN_SPLINES {
            bad.push(format!("k_min {} is below the minimum of {MIN_SPLINES}", self.k_min));
        }
        if self.l_min < 1 || self.l_min > self.l_max {
            bad.push(format!(
                "need 1 <= l_min <= l_max, got {} and {}",
                self.l_min, self.l_max
            ));
        }
        if !(self.pve_threshold > 0.0 && self.pve_threshold <= 1.0) {
            bad.push(format!("pve_threshold must lie in (0, 1], got {}", self.pve_threshold));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub ks: Vec<usize>,
    pub l: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub candidate: Candidate,
    /// Final ELBO; `-inf` when the fit failed.
    pub elbo: f64,
    pub converged: bool,
    pub probability: f64,
    pub error: Option<String>,
}

/// Fits every candidate independently (in parallel, seed `hyper.seed + index`)
/// and weights them by `exp(ELBO)` under a uniform prior.
///
/// Non-converged fits keep their final ELBO and are logged; failed fits get
/// probability zero.
pub fn model_choice(
    data: &FunctionalDataset,
    candidates: &[Candidate],
    hyper: &Hyperparameters,
    engine: Engine,
) -> Result<Vec<CandidateResult>> {
    use rayon::prelude::*;
    if candidates.is_empty() {
        return Err(Error::Config("model choice needs at least one candidate".into()));
    }
    let outcomes: Vec<Result<RawFit>> = candidates
        .par_iter()
        .enumerate()
        .map(|(idx, c)| {
            let h = Hyperparameters {
                l: c.l,
                seed: hyper.seed.wrapping_add(idx as u64),
                ..hyper.clone()
            };
            let bases = bases_for(&c.ks)?;
            fit(engine, data, &bases, &h)
        })
        .collect();
    let mut results: Vec<CandidateResult> = candidates
        .iter()
        .zip(outcomes)
        .map(|(c, o)| match o {
            Ok(raw) => {
                if !raw.converged {
                    log::warn!(
                        "candidate K={:?} L={} did not converge; using its final ELBO",
                        c.ks,
                        c.l
                    );
                }
                CandidateResult {
                    candidate: c.clone(),
                    elbo: raw.final_elbo(),
                    converged: raw.converged,
                    probability: 0.0,
                    error: None,
                }
            }
            Err(e) => CandidateResult {
                candidate: c.clone(),
                elbo: f64::NEG_INFINITY,
                converged: false,
                probability: 0.0,
                error: Some(e.to_string()),
            },
        })
        .collect();
    if results.iter().all(|r| r.error.is_some()) {
        return Err(Error::AllCandidatesFailed(
            results
                .iter()
                .map(|r| {
                    format!(
                        "K={:?} L={}: {}",
                        r.candidate.ks,
                        r.candidate.l,
                        r.error.as_deref().unwrap_or("")
                    )
                })
                .collect(),
        ));
    }
    let probs = posterior_probabilities(&results.iter().map(|r| r.elbo).collect::<Vec<_>>());
    for (r, p) in results.iter_mut().zip(probs) {
        r.probability = p;
    }
    Ok(results)
}

/// Index of the most probable candidate; the earliest wins ties.
pub fn argmax(results: &[CandidateResult]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in results.iter().enumerate() {
        if best.is_none_or(|b| r.probability > results[b].probability) {
            best = Some(i);
        }
    }
    best
}

/// Outcome of [`select`].
#[derive(Debug, Clone)]
pub struct Selection {
    pub ks: Vec<usize>,
    pub l: usize,
    /// Every candidate fitted by model choice, empty otherwise.
    pub candidates: Vec<CandidateResult>,
    /// Scree of the `L_max` fit when the PVE rule chose `L`.
    pub pve: Option<Vec<f64>>,
    /// The `L_max` fit behind the PVE rule.
    pub fit: Option<(RawFit, OrthonormalizedFit)>,
}

/// Chooses `K` and `L` as configured.
///
/// With model choice for `K` every variable shares one `K` from
/// `k_min..=k_max`; the candidates use `L_max` under the PVE rule and span
/// the full `(K, L)` grid when `L` is also chosen by model choice.
pub fn select(
    data: &FunctionalDataset,
    config: &SelectionConfig,
    hyper: &Hyperparameters,
    engine: Engine,
) -> Result<Selection> {
    config.validate()?;
    let p = data.p();
    let k_grid: Vec<Vec<usize>> = match config.k_strategy {
        KStrategy::RuleOfThumb => vec![rule_of_thumb_k(data)],
        KStrategy::ModelChoice => (config.k_min..=config.k_max).map(|k| vec![k; p]).collect(),
    };
    let l_grid: Vec<usize> = match config.l_strategy {
        LStrategy::Pve => vec![config.l_max],
        LStrategy::ModelChoice => (config.l_min..=config.l_max).collect(),
    };
    let mut candidates_out = Vec::new();
    let (ks, l_mc) = if k_grid.len() * l_grid.len() == 1 {
        (k_grid[0].clone(), l_grid[0])
    } else {
        let candidates: Vec<Candidate> = k_grid
            .iter()
            .flat_map(|ks| l_grid.iter().map(|&l| Candidate { ks: ks.clone(), l }))
            .collect();
        candidates_out = model_choice(data, &candidates, hyper, engine)?;
        let best = argmax(&candidates_out).expect("non-empty candidate list");
        (
            candidates_out[best].candidate.ks.clone(),
            candidates_out[best].candidate.l,
        )
    };
    match config.l_strategy {
        LStrategy::ModelChoice => Ok(Selection {
            ks,
            l: l_mc,
            candidates: candidates_out,
            pve: None,
            fit: None,
        }),
        LStrategy::Pve => {
            let bases = bases_for(&ks)?;
            let h = Hyperparameters {
                l: config.l_max,
                ..hyper.clone()
            };
            let raw = fit(engine, data, &bases, &h)?;
            let grid = EvaluationGrid::new(DEFAULT_GRID_SIZE)?;
            let ofit = orthonormalize_on(&raw, &bases, &grid)?;
            let l = select_l_pve(&ofit, config.pve_threshold);
            Ok(Selection {
                ks,
                l,
                candidates: candidates_out,
                pve: Some(ofit.pve.clone()),
                fit: Some((raw, ofit)),
            })
        }
    }
}
