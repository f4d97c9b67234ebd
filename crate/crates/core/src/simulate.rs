//! Synthetic curves with known mean, eigenfunctions and scores, plus the
//! error metrics and replicate driver used to score fits against them.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{FunctionalDataset, Series, MIN_SERIES_LEN};
use crate::engines::{fit, Engine};
use crate::error::{Error, Result};
use crate::model::Hyperparameters;
use crate::postprocess::{
    orthonormality_error, orthonormalize_on, reconstruction_error, stacked_weights, OrthonormalizedFit,
};
use crate::select::{l_from_pve, rule_of_thumb_k};
use crate::splines::{bases_for, BSplineSpace, EvaluationGrid, DEFAULT_GRID_SIZE};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionFamily {
    /// `mu^(j)(t) = (-1)^j 2 sin((2 pi + j) t)` with sine/cosine harmonics.
    Periodic,
    /// Cubic B-splines made H-orthonormal by Gram-Schmidt.
    Bspline,
}

/// Variables observed on their own count range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseSpec {
    /// 0-based variable indices.
    pub variables: Vec<usize>,
    pub obs_range: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationScenario {
    pub n: usize,
    pub p: usize,
    pub l_true: usize,
    /// Inclusive range of observation counts per subject and variable.
    pub obs_range: (usize, usize),
    pub family: FunctionFamily,
    /// Score s.d. of component `l` is `l^(-1/alpha)`.
    pub alpha: f64,
    /// Correlation between the variable-specific scores; 1 shares one score
    /// vector per subject across variables.
    pub rho: f64,
    pub noise_sd: f64,
    pub sparse: Option<SparseSpec>,
    pub seed: u64,
}

impl Default for SimulationScenario {
    fn default() -> Self {
        Self {
            n: 50,
            p: 3,
            l_true: 2,
            obs_range: (10, 20),
            family: FunctionFamily::Periodic,
            alpha: 2.0,
            rho: 1.0,
            noise_sd: 1.0,
            sparse: None,
            seed: 1,
        }
    }
}

impl SimulationScenario {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n < 1 || self.p < 1 || self.l_true < 1 {
            bad.push(format!(
                "n, p and L must be positive (got {}, {}, {})",
                self.n, self.p, self.l_true
            ));
        }
        let check_range = |r: (usize, usize), what: &str, bad: &mut Vec<String>| {
            if r.0 > r.1 || r.0 < MIN_SERIES_LEN {
                bad.push(format!("{what} {:?} must satisfy {MIN_SERIES_LEN} <= min <= max", r));
            }
        };
        check_range(self.obs_range, "observation range", &mut bad);
        if let Some(s) = &self.sparse {
            check_range(s.obs_range, "sparse observation range", &mut bad);
            if let Some(&j) = s.variables.iter().find(|&&j| j >= self.p) {
                bad.push(format!("sparse variable index {j} out of range (p = {})", self.p));
            }
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            bad.push(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            bad.push(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            bad.push(format!("noise_sd must be non-negative, got {}", self.noise_sd));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Self = serde_json::from_str(&text)?;
        s.validate()?;
        Ok(s)
    }

    /// True score standard deviations `l^(-1/alpha)`.
    pub fn score_sds(&self) -> Vec<f64> {
        (1..=self.l_true).map(|l| (l as f64).powf(-1.0 / self.alpha)).collect()
    }

    fn obs_range_of(&self, j: usize) -> (usize, usize) {
        match &self.sparse {
            Some(s) if s.variables.contains(&j) => s.obs_range,
            _ => self.obs_range,
        }
    }
}

fn sign(j: usize) -> f64 {
    // variables are 1-based in the formulas
    if (j + 1) % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// H-orthonormal B-spline eigenfunctions: `psi_l^(j)(t) = s_j c_l' B(t)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct BsplineTruth {
    space: BSplineSpace,
    /// Column `l` holds the coefficients of component `l`.
    coef: DMatrix<f64>,
}

impl BsplineTruth {
    /// Gram-Schmidt of `B_2, ..., B_{L+1}` (repeated across variables with
    /// alternating signs) under the discretized H inner product.
    fn new(l: usize, p: usize) -> Result<Self> {
        let n_basis = l + 2;
        // clamped cubic with n_basis functions has n_basis - 4 interior knots
        let n_int = n_basis.saturating_sub(4);
        let interior: Vec<f64> = (1..=n_int).map(|k| k as f64 / (n_int + 1) as f64).collect();
        let space = BSplineSpace::clamped(&interior, 3);
        let grid = EvaluationGrid::new(DEFAULT_GRID_SIZE)?;
        let w = grid.weights();
        let b = DMatrix::from_fn(grid.len(), space.n_basis(), |r, c| space.eval(grid.t[r])[c]);
        // H inner product of coefficient vectors: p * a' B' W B c
        let gram = b.tr_mul(&DMatrix::from_fn(b.nrows(), b.ncols(), |r, c| w[r] * b[(r, c)])) * p as f64;
        let mut coef = DMatrix::zeros(space.n_basis(), l);
        for c in 0..l {
            let mut v = DVector::zeros(space.n_basis());
            v[c + 1] = 1.0;
            for prev in 0..c {
                let u = coef.column(prev).into_owned();
                let proj = (u.transpose() * &gram * &v)[0];
                v -= u * proj;
            }
            let norm = (v.transpose() * &gram * &v)[0].sqrt();
            if !(norm > 1e-12) {
                return Err(Error::Numerical("Gram-Schmidt produced a zero vector".into()));
            }
            coef.set_column(c, &(v / norm));
        }
        Ok(Self { space, coef })
    }

    fn eval(&self, l: usize, t: f64) -> f64 {
        self.space.eval(t).dot(&self.coef.column(l))
    }
}

/// Generating truth of a simulated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scenario: SimulationScenario,
    /// One `n x L` matrix when scores are shared, else one per variable.
    pub scores: Vec<DMatrix<f64>>,
    pub noise_sd: f64,
    bspline: Option<BsplineTruth>,
}

impl GroundTruth {
    pub fn p(&self) -> usize {
        self.scenario.p
    }

    pub fn l(&self) -> usize {
        self.scenario.l_true
    }

    /// `mu^(j)(t)`, 0-based `j`.
    pub fn mean(&self, j: usize, t: f64) -> f64 {
        sign(j) * 2.0 * ((2.0 * PI + (j + 1) as f64) * t).sin()
    }

    /// `psi_l^(j)(t)`, 0-based `l` and `j`.
    pub fn eigenfunction(&self, l: usize, j: usize, t: f64) -> f64 {
        match &self.bspline {
            Some(b) => sign(j) * b.eval(l, t),
            None => {
                let harmonic = (l / 2 + 1) as f64;
                let amp = sign(j) * (2.0 / self.p() as f64).sqrt();
                if l % 2 == 0 {
                    amp * (2.0 * harmonic * PI * t).cos()
                } else {
                    amp * (2.0 * harmonic * PI * t).sin()
                }
            }
        }
    }

    /// Scores driving variable `j`.
    pub fn scores_for(&self, j: usize) -> &DMatrix<f64> {
        if self.scores.len() == 1 {
            &self.scores[0]
        } else {
            &self.scores[j]
        }
    }

    /// Scores shared by all variables, or their average across variables.
    pub fn shared_scores(&self) -> DMatrix<f64> {
        let mut acc = self.scores[0].clone();
        for s in &self.scores[1..] {
            acc += s;
        }
        acc / self.scores.len() as f64
    }

    pub fn mean_on(&self, grid: &EvaluationGrid) -> Vec<DVector<f64>> {
        (0..self.p())
            .map(|j| DVector::from_iterator(grid.len(), grid.t.iter().map(|&t| self.mean(j, t))))
            .collect()
    }

    /// `(p n_g) x L` matrix of eigenfunctions stacked over variables.
    pub fn eigenfunctions_on(&self, grid: &EvaluationGrid) -> DMatrix<f64> {
        let ng = grid.len();
        DMatrix::from_fn(self.p() * ng, self.l(), |r, l| {
            self.eigenfunction(l, r / ng, grid.t[r % ng])
        })
    }

    /// Noiseless curve of subject `i` on variable `j` at `t`.
    pub fn signal(&self, i: usize, j: usize, t: f64) -> f64 {
        let z = self.scores_for(j);
        self.mean(j, t)
            + (0..self.l())
                .map(|l| z[(i, l)] * self.eigenfunction(l, j, t))
                .sum::<f64>()
    }
}

/// Draws a dataset from the scenario; identical scenarios give identical data.
pub fn generate_dataset(scenario: &SimulationScenario) -> Result<(FunctionalDataset, GroundTruth)> {
    scenario.validate()?;
    let (n, p, l) = (scenario.n, scenario.p, scenario.l_true);
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let sds = scenario.score_sds();

    let scores = if scenario.rho >= 1.0 {
        vec![DMatrix::from_fn(n, l, |_, c| {
            sds[c] * rng.sample::<f64, _>(StandardNormal)
        })]
    } else {
        let (a, b) = (scenario.rho.sqrt(), (1.0 - scenario.rho).sqrt());
        let common = DMatrix::from_fn(n, l, |_, _| rng.sample::<f64, _>(StandardNormal));
        (0..p)
            .map(|_| {
                DMatrix::from_fn(n, l, |i, c| {
                    sds[c] * (a * common[(i, c)] + b * rng.sample::<f64, _>(StandardNormal))
                })
            })
            .collect()
    };
    let bspline = match scenario.family {
        FunctionFamily::Periodic => None,
        FunctionFamily::Bspline => Some(BsplineTruth::new(l, p)?),
    };
    let truth = GroundTruth {
        scenario: scenario.clone(),
        scores,
        noise_sd: scenario.noise_sd,
        bspline,
    };

    let noise = Normal::new(0.0, scenario.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let mut series = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(p);
        for j in 0..p {
            let (lo, hi) = scenario.obs_range_of(j);
            let m = rng.random_range(lo..=hi);
            let mut t: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            t.sort_by(f64::total_cmp);
            let x = t.iter().map(|&t| truth.signal(i, j, t) + rng.sample(noise)).collect();
            row.push(Series::new(t, x));
        }
        series.push(row);
    }
    let ids = (1..=n).map(|i| format!("s{i:04}")).collect();
    let vars = (1..=p).map(|j| format!("x{j}")).collect();
    let data = FunctionalDataset::new(ids, vars, series, (0.0, 1.0))?;
    Ok((data, truth))
}

/// Per-component `sqrt(mean_i (est_il - truth_il)^2)`.
pub fn rmse_scores(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<Vec<f64>> {
    if estimate.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "score matrices {:?} and {:?}",
            estimate.shape(),
            truth.shape()
        )));
    }
    let n = estimate.nrows() as f64;
    Ok((0..estimate.ncols())
        .map(|c| ((estimate.column(c) - truth.column(c)).norm_squared() / n).sqrt())
        .collect())
}

/// Trapezoidal `∫ (f - g)^2` for one variable on `grid`.
pub fn ise(estimate: &DVector<f64>, truth: &DVector<f64>, grid: &EvaluationGrid) -> Result<f64> {
    if estimate.len() != grid.len() || truth.len() != grid.len() {
        return Err(Error::Shape(format!(
            "curves of length {} and {} on a grid of {}",
            estimate.len(),
            truth.len(),
            grid.len()
        )));
    }
    let w = grid.weights();
    Ok((estimate - truth).iter().zip(w.iter()).map(|(d, w)| d * d * w).sum())
}

/// Per-variable ISE averaged over variables, for curves stacked over `p`.
pub fn ise_stacked(estimate: &DVector<f64>, truth: &DVector<f64>, grid: &EvaluationGrid) -> Result<f64> {
    let ng = grid.len();
    if estimate.len() != truth.len() || ng == 0 || estimate.len() % ng != 0 {
        return Err(Error::Shape(format!(
            "stacked curves of length {} and {}",
            estimate.len(),
            truth.len()
        )));
    }
    let p = estimate.len() / ng;
    let w = stacked_weights(grid, p);
    let total: f64 = (estimate - truth).iter().zip(w.iter()).map(|(d, w)| d * d * w).sum();
    Ok(total / p as f64)
}

fn correlation(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let (ma, mb) = (a.mean(), b.mean());
    let ca = a.map(|v| v - ma);
    let cb = b.map(|v| v - mb);
    let den = ca.norm() * cb.norm();
    if den > 0.0 {
        ca.dot(&cb) / den
    } else {
        0.0
    }
}

/// Matching of estimated to true components.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// `source[l]` is the estimated column matched to true component `l`.
    pub source: Vec<Option<usize>>,
    /// `+1` or `-1` per true component.
    pub signs: Vec<f64>,
}

/// Greedy matching by largest absolute score correlation, then a sign fix
/// making every matched correlation positive.
pub fn align_components(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<Alignment> {
    if estimate.nrows() != truth.nrows() {
        return Err(Error::Shape(format!(
            "{} vs {} subjects",
            estimate.nrows(),
            truth.nrows()
        )));
    }
    let (le, lt) = (estimate.ncols(), truth.ncols());
    let corr = DMatrix::from_fn(le, lt, |a, b| {
        correlation(&estimate.column(a).into_owned(), &truth.column(b).into_owned())
    });
    let mut source = vec![None; lt];
    let mut signs = vec![1.0; lt];
    let mut used_e = vec![false; le];
    for _ in 0..le.min(lt) {
        let mut best: Option<(usize, usize)> = None;
        for a in (0..le).filter(|&a| !used_e[a]) {
            for b in (0..lt).filter(|&b| source[b].is_none()) {
                if best.is_none_or(|(x, y)| corr[(a, b)].abs() > corr[(x, y)].abs()) {
                    best = Some((a, b));
                }
            }
        }
        let (a, b) = best.expect("free pair exists while both sides have slack");
        used_e[a] = true;
        source[b] = Some(a);
        signs[b] = if corr[(a, b)] < 0.0 { -1.0 } else { 1.0 };
    }
    Ok(Alignment { source, signs })
}

/// Fit components rearranged to match the truth; unmatched components are zero.
#[derive(Debug, Clone)]
pub struct AlignedFit {
    pub scores: DMatrix<f64>,
    pub score_sd: DMatrix<f64>,
    pub eigenfunctions: DMatrix<f64>,
}

/// Aligns the leading `L_true` components of `fit` (fewer if the fit has
/// fewer) to `truth_scores`, multiplying scores by `scale` and dividing
/// eigenfunctions by it.
pub fn align_fit(fit: &OrthonormalizedFit, truth_scores: &DMatrix<f64>, scale: f64) -> Result<AlignedFit> {
    let lt = truth_scores.ncols();
    let lead = fit.l().min(lt);
    let est = fit.scores.columns(0, lead).into_owned();
    let al = align_components(&est, truth_scores)?;
    let n = fit.n();
    let mut scores = DMatrix::zeros(n, lt);
    let mut score_sd = DMatrix::zeros(n, lt);
    let mut eigenfunctions = DMatrix::zeros(fit.eigenfunctions.nrows(), lt);
    for (b, src) in al.source.iter().enumerate() {
        if let Some(a) = *src {
            let s = al.signs[b];
            scores.set_column(b, &(fit.scores.column(a) * (s * scale)));
            for i in 0..n {
                score_sd[(i, b)] = fit.score_cov[i][(a, a)].max(0.0).sqrt() * scale;
            }
            eigenfunctions.set_column(b, &(fit.eigenfunctions.column(a) * (s / scale)));
        }
    }
    Ok(AlignedFit {
        scores,
        score_sd,
        eigenfunctions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// One joint fit of all variables.
    Multivariate,
    /// One `p = 1` fit per variable, rescaled by `sqrt(p)`.
    Univariate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplicateConfig {
    pub engine: Engine,
    /// Hyperparameters of every fit; `l` is the `L_max` of the PVE rule.
    pub hyper: Hyperparameters,
    pub pve_threshold: f64,
    /// Fixed `K` for every variable; `None` applies the rule of thumb.
    pub k: Option<usize>,
    pub grid_size: usize,
}

impl Default for ReplicateConfig {
    fn default() -> Self {
        Self {
            engine: Engine::Mfvb,
            hyper: Hyperparameters {
                l: 10,
                ..Default::default()
            },
            pve_threshold: 0.95,
            k: None,
            grid_size: DEFAULT_GRID_SIZE,
        }
    }
}

/// One `(replicate, method, variable, component)` result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub method: Method,
    /// 1-based variable of a univariate fit.
    pub variable: Option<usize>,
    /// 1-based true component.
    pub component: usize,
    pub rmse: f64,
    pub ise: f64,
    /// ISE of the mean, averaged over the fitted variables.
    pub mean_ise: f64,
    pub selected_l: usize,
    /// Fraction of subjects whose 95% score interval covers the truth.
    pub coverage: f64,
    pub ci_length: f64,
    pub converged: bool,
    pub runtime_s: f64,
    /// `max |<psi_l, psi_l'>_H - delta_ll'|` of the fit.
    pub orthonormality_error: f64,
    /// Largest change of a fitted curve caused by orthonormalization.
    pub reconstruction_error: f64,
    pub error: Option<String>,
}

/// Seed of replicate `r`.
pub fn replicate_seed(base: u64, r: usize) -> u64 {
    base.wrapping_add(r as u64)
}

fn score_fit(
    replicate: usize,
    method: Method,
    variable: Option<usize>,
    data: &FunctionalDataset,
    truth: &GroundTruth,
    config: &ReplicateConfig,
) -> Result<Vec<ReplicateRow>> {
    let start = Instant::now();
    let ks = match config.k {
        Some(k) => vec![k; data.p()],
        None => rule_of_thumb_k(data),
    };
    let bases = bases_for(&ks)?;
    let raw = fit(config.engine, data, &bases, &config.hyper)?;
    let grid = EvaluationGrid::new(config.grid_size)?;
    let ofit = orthonormalize_on(&raw, &bases, &grid)?;
    let runtime_s = start.elapsed().as_secs_f64();
    let selected_l = l_from_pve(&ofit.pve, config.pve_threshold);
    let ortho_err = orthonormality_error(&ofit);
    let recon_err = reconstruction_error(&raw, &bases, &ofit);

    let vars: Vec<usize> = match variable {
        Some(j) => vec![j],
        None => (0..truth.p()).collect(),
    };
    let truth_scores = match variable {
        Some(j) => truth.scores_for(j).clone(),
        None => truth.shared_scores(),
    };
    let scale = match method {
        Method::Multivariate => 1.0,
        Method::Univariate => (truth.p() as f64).sqrt(),
    };
    let aligned = align_fit(&ofit, &truth_scores, scale)?;
    let rmse = rmse_scores(&aligned.scores, &truth_scores)?;
    let all_eig = truth.eigenfunctions_on(&grid);
    let ng = grid.len();
    let true_eig = DMatrix::from_fn(vars.len() * ng, truth.l(), |r, l| {
        all_eig[(vars[r / ng] * ng + r % ng, l)]
    });
    let all_mean = truth.mean_on(&grid);
    let mut mean_ise = 0.0;
    for (k, &j) in vars.iter().enumerate() {
        mean_ise += ise(&ofit.mean[k], &all_mean[j], &grid)?;
    }
    mean_ise /= vars.len() as f64;

    let n = data.n();
    let mut rows = Vec::with_capacity(truth.l());
    for l in 0..truth.l() {
        let e = aligned.eigenfunctions.column(l).into_owned();
        let t = true_eig.column(l).into_owned();
        let ise_l = ise_stacked(&e, &t, &grid)?;
        let mut covered = 0usize;
        let mut length = 0.0;
        for i in 0..n {
            let half = Z_95 * aligned.score_sd[(i, l)];
            if (aligned.scores[(i, l)] - truth_scores[(i, l)]).abs() <= half {
                covered += 1;
            }
            length += 2.0 * half;
        }
        rows.push(ReplicateRow {
            replicate,
            method,
            variable: variable.map(|j| j + 1),
            component: l + 1,
            rmse: rmse[l],
            ise: ise_l,
            mean_ise,
            selected_l,
            coverage: covered as f64 / n as f64,
            ci_length: length / n as f64,
            converged: raw.converged,
            runtime_s,
            orthonormality_error: ortho_err,
            reconstruction_error: recon_err,
            error: None,
        });
    }
    Ok(rows)
}

fn failed_rows(replicate: usize, method: Method, variable: Option<usize>, l: usize, err: &Error) -> Vec<ReplicateRow> {
    (0..l)
        .map(|c| ReplicateRow {
            replicate,
            method,
            variable: variable.map(|j| j + 1),
            component: c + 1,
            rmse: f64::NAN,
            ise: f64::NAN,
            mean_ise: f64::NAN,
            selected_l: 0,
            coverage: f64::NAN,
            ci_length: f64::NAN,
            converged: false,
            runtime_s: 0.0,
            orthonormality_error: f64::NAN,
            reconstruction_error: f64::NAN,
            error: Some(err.to_string()),
        })
        .collect()
}

/// Rows of one replicate: generate, fit with every method, score.
pub fn run_replicate(
    scenario: &SimulationScenario,
    methods: &[Method],
    r: usize,
    config: &ReplicateConfig,
) -> Result<Vec<ReplicateRow>> {
    let sc = SimulationScenario {
        seed: replicate_seed(scenario.seed, r),
        ..scenario.clone()
    };
    let (data, truth) = generate_dataset(&sc)?;
    let mut rows = Vec::new();
    for &method in methods {
        let jobs: Vec<Option<usize>> = match method {
            Method::Multivariate => vec![None],
            Method::Univariate => (0..data.p()).map(Some).collect(),
        };
        for variable in jobs {
            let subset = match variable {
                Some(j) => data.select_variables(&[j])?,
                None => data.clone(),
            };
            match score_fit(r, method, variable, &subset, &truth, config) {
                Ok(mut rs) => rows.append(&mut rs),
                Err(e) => {
                    log::warn!("replicate {r} ({method:?}, variable {variable:?}) failed: {e}");
                    rows.extend(failed_rows(r, method, variable, truth.l(), &e));
                }
            }
        }
    }
    Ok(rows)
}

/// Runs `replicates` seeded replicates in parallel; rows come back in
/// replicate order.
pub fn run_replicates(
    scenario: &SimulationScenario,
    methods: &[Method],
    replicates: usize,
    config: &ReplicateConfig,
) -> Result<Vec<ReplicateRow>> {
    use rayon::prelude::*;
    scenario.validate()?;
    config.hyper.validate()?;
    let per: Vec<Vec<ReplicateRow>> = (0..replicates)
        .into_par_iter()
        .map(|r| run_replicate(scenario, methods, r, config))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Median of the finite values, `NaN` when there are none.
pub fn median_f64(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    /// Periodic two-component data with 10 to 20 points per curve.
    pub fn small_dataset(n: usize, p: usize, seed: u64) -> FunctionalDataset {
        let sc = SimulationScenario {
            n,
            p,
            seed,
            ..Default::default()
        };
        generate_dataset(&sc).unwrap().0
    }
}
