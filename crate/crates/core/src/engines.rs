//! Inference drivers: mean-field coordinate ascent and variational message
//! passing over the same factor graph, plus the closed-form ELBO.
//!
//! Factors of the graph: the likelihood fragment, one `N(0, I)` prior per
//! score vector, one Gaussian penalization factor per variable (linking
//! `nu^(j)` to its mean and component variances), one iterated inverse-χ²
//! factor per variance (`sigma^2 | a ~ Inverse-χ²(1, 1/a)`) and one
//! `Inverse-χ²(1, 1/A²)` prior per auxiliary variable.

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};
use crate::expfam::{invchisq_expected_log_density, GaussianForm, GaussianNatural, InvChiSqNatural, LN_2PI};
use crate::fragment::{message_to_nu, message_to_sigma_eps, message_to_zeta};
use crate::model::{
    initialize_state, prior_natural_params, refresh_moments, slot_of_block, Designs, Hyperparameters, MomentCache,
    PriorMessages, VariationalState, SLOT_EPS,
};
use crate::splines::SplineBasis;

/// Largest relative ELBO decrease an MFVB sweep may show before it is
/// treated as a defect.
pub const MFVB_DECREASE_TOL: f64 = 1e-8;
/// Largest transient relative decrease tolerated under message passing.
pub const VMP_DECREASE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Mfvb,
    Vmp,
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Engine::Mfvb => "mfvb",
            Engine::Vmp => "vmp",
        })
    }
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mfvb" => Ok(Engine::Mfvb),
            "vmp" => Ok(Engine::Vmp),
            other => Err(Error::Config(format!(
                "unknown engine '{other}' (expected mfvb or vmp)"
            ))),
        }
    }
}

/// Every message currently stored on the factor graph.
#[derive(Debug, Clone)]
pub struct VmpMessages {
    pub lik_to_nu: Vec<GaussianNatural>,
    pub pen_to_nu: Vec<GaussianNatural>,
    pub lik_to_zeta: Vec<GaussianNatural>,
    pub prior_to_zeta: GaussianNatural,
    /// Slot 0 holds the likelihood message to the noise variance, slot
    /// `1 + a` the penalization message to the variance of block `a`.
    pub to_sigma: Vec<Vec<InvChiSqNatural>>,
    pub iter_to_sigma: Vec<Vec<InvChiSqNatural>>,
    pub iter_to_aux: Vec<Vec<InvChiSqNatural>>,
    pub prior_to_aux: InvChiSqNatural,
}

/// Unidentified fit: raw latent functions and scores before orthonormalization.
#[derive(Debug, Clone)]
pub struct RawFit {
    pub state: VariationalState,
    pub cache: MomentCache,
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub engine: Engine,
    pub fingerprint: String,
    /// `K_j` per variable; bases are rebuilt from these.
    pub ks: Vec<usize>,
    pub hyper: Hyperparameters,
    pub subject_ids: Vec<String>,
    pub variable_names: Vec<String>,
    pub time_range: (f64, f64),
    pub messages: Option<VmpMessages>,
}

impl RawFit {
    pub fn final_elbo(&self) -> f64 {
        self.elbo_trace.last().copied().unwrap_or(f64::NEG_INFINITY)
    }

    pub fn n(&self) -> usize {
        self.state.n()
    }

    pub fn p(&self) -> usize {
        self.state.p()
    }

    pub fn l(&self) -> usize {
        self.state.l
    }
}

/// Penalization message to `nu^(j)`: prior precision
/// `blockdiag_a(sigma_beta^-2 I_2, E(1/sigma_a^2) I_K)`.
pub fn penalty_to_nu(cache: &MomentCache, prior: &PriorMessages, j: usize) -> GaussianNatural {
    let d = cache.nu[j].d;
    let l1 = cache.l + 1;
    let mut diag = DVector::zeros(l1 * d);
    for a in 0..l1 {
        let s = cache.e_inv_sigma2[j][slot_of_block(a)];
        for k in 0..d {
            diag[a * d + k] = if k < 2 { 1.0 / prior.sigma_beta2 } else { s };
        }
    }
    GaussianNatural::from_precision(
        DVector::zeros(l1 * d),
        &DMatrix::from_diagonal(&diag),
        GaussianForm::Vec,
    )
}

/// Penalization message to the variance of block `a` of `nu^(j)`:
/// `(-K/2, -E||u_a||^2 / 2)`.
pub fn penalty_to_variance(cache: &MomentCache, j: usize, a: usize) -> InvChiSqNatural {
    let m = &cache.nu[j];
    let k = m.d - 2;
    InvChiSqNatural {
        eta1: -0.5 * k as f64,
        eta2: -0.5 * m.block_sq(a, 2, k),
    }
}

/// Iterated inverse-χ² factor to its variance: `(-3/2, -E(1/a)/2)`.
pub fn iterated_to_sigma(e_inv_aux: f64) -> InvChiSqNatural {
    InvChiSqNatural {
        eta1: -1.5,
        eta2: -0.5 * e_inv_aux,
    }
}

/// Iterated inverse-χ² factor to its auxiliary: `(-1/2, -E(1/sigma^2)/2)`.
pub fn iterated_to_aux(e_inv_sigma2: f64) -> InvChiSqNatural {
    InvChiSqNatural {
        eta1: -0.5,
        eta2: -0.5 * e_inv_sigma2,
    }
}

/// Evidence lower bound `E_q log p(x, theta) - E_q log q(theta)`, all
/// constants included.
pub fn elbo(state: &VariationalState, cache: &MomentCache, designs: &Designs, hyper: &Hyperparameters) -> Result<f64> {
    let l = state.l;
    let sb2 = hyper.sigma_beta * hyper.sigma_beta;
    let inv_a2 = 1.0 / (hyper.a * hyper.a);
    let mut total = 0.0;

    for (j, block) in designs.blocks.iter().enumerate() {
        let e_log = |s: usize| state.sigma2[j][s].mean_log();
        let e_inv = |s: usize| cache.e_inv_sigma2[j][s];

        // likelihood
        let n_obs = block.total as f64;
        let rss: f64 = (0..designs.n).map(|i| cache.expected_rss(designs, j, i)).sum();
        total += -0.5 * n_obs * LN_2PI - 0.5 * n_obs * e_log(SLOT_EPS)? - 0.5 * e_inv(SLOT_EPS) * rss;

        // coefficient priors
        let m = &cache.nu[j];
        let (d, k) = (m.d, m.d - 2);
        for a in 0..=l {
            let slot = slot_of_block(a);
            total += -0.5 * d as f64 * LN_2PI
                - sb2.ln()
                - 0.5 * k as f64 * e_log(slot)?
                - 0.5 * m.block_sq(a, 0, 2) / sb2
                - 0.5 * e_inv(slot) * m.block_sq(a, 2, k);
        }
        total += 0.5 * m.mean.len() as f64 * (1.0 + LN_2PI) + 0.5 * m.log_det_cov;

        // variances and auxiliaries
        for slot in 0..state.n_slots() {
            let sig = &state.sigma2[j][slot];
            let aux = &state.aux[j][slot];
            let e_inv_aux = cache.e_inv_aux[j][slot];
            let e_log_aux = aux.mean_log()?;
            total += invchisq_expected_log_density(1.0, e_inv_aux, -e_log_aux, sig.mean_log()?, e_inv(slot));
            total += invchisq_expected_log_density(1.0, inv_a2, inv_a2.ln(), e_log_aux, e_inv_aux);
            total += sig.entropy()? + aux.entropy()?;
        }
    }

    for z in &cache.zeta {
        total += -0.5 * l as f64 * LN_2PI - 0.5 * (z.mean.norm_squared() + z.cov.trace());
        total += 0.5 * l as f64 * (1.0 + LN_2PI) + 0.5 * z.log_det_cov;
    }
    if !total.is_finite() {
        return Err(Error::Numerical(format!("ELBO evaluated to {total}")));
    }
    Ok(total)
}

struct Driver<'a> {
    designs: &'a Designs,
    hyper: &'a Hyperparameters,
    prior: PriorMessages,
}

impl Driver<'_> {
    fn update_zeta(&self, state: &mut VariationalState, cache: &MomentCache) -> Result<Vec<GaussianNatural>> {
        let msgs: Vec<GaussianNatural> = (0..self.designs.n)
            .into_par_iter()
            .map(|i| message_to_zeta(cache, self.designs, i))
            .collect::<Result<_>>()?;
        for (q, m) in state.zeta.iter_mut().zip(&msgs) {
            *q = m + &self.prior.zeta;
        }
        Ok(msgs)
    }

    fn update_nu(
        &self,
        state: &mut VariationalState,
        cache: &MomentCache,
    ) -> Result<(Vec<GaussianNatural>, Vec<GaussianNatural>)> {
        let p = self.designs.p();
        let lik: Vec<GaussianNatural> = (0..p)
            .into_par_iter()
            .map(|j| message_to_nu(cache, self.designs, j))
            .collect::<Result<_>>()?;
        let pen: Vec<GaussianNatural> = (0..p).map(|j| penalty_to_nu(cache, &self.prior, j)).collect();
        for j in 0..p {
            state.nu[j] = &lik[j] + &pen[j];
        }
        Ok((lik, pen))
    }

    /// Updates every variance from `data_msgs` (slot 0: likelihood,
    /// others: penalization) and the current auxiliaries.
    fn update_variances(
        &self,
        state: &mut VariationalState,
        cache: &MomentCache,
        data_msgs: &[Vec<InvChiSqNatural>],
    ) -> Vec<Vec<InvChiSqNatural>> {
        let iter: Vec<Vec<InvChiSqNatural>> = cache
            .e_inv_aux
            .iter()
            .map(|row| row.iter().map(|&e| iterated_to_sigma(e)).collect())
            .collect();
        for (j, row) in state.sigma2.iter_mut().enumerate() {
            for (s, q) in row.iter_mut().enumerate() {
                *q = data_msgs[j][s] + iter[j][s];
            }
        }
        iter
    }

    fn update_aux(&self, state: &mut VariationalState, cache: &MomentCache) -> Vec<Vec<InvChiSqNatural>> {
        let iter: Vec<Vec<InvChiSqNatural>> = cache
            .e_inv_sigma2
            .iter()
            .map(|row| row.iter().map(|&e| iterated_to_aux(e)).collect())
            .collect();
        for (j, row) in state.aux.iter_mut().enumerate() {
            for (s, q) in row.iter_mut().enumerate() {
                *q = self.prior.aux + iter[j][s];
            }
        }
        iter
    }

    fn penalty_to_variances(&self, cache: &MomentCache, sigma_eps: &[InvChiSqNatural]) -> Vec<Vec<InvChiSqNatural>> {
        (0..self.designs.p())
            .map(|j| {
                let mut row = vec![sigma_eps[j]];
                row.extend((0..=cache.l).map(|a| penalty_to_variance(cache, j, a)));
                row
            })
            .collect()
    }

    /// One coordinate-ascent sweep: scores, coefficients, noise variances,
    /// smoothing variances, auxiliaries. Leaves `cache` fresh.
    fn mfvb_sweep(&self, state: &mut VariationalState, cache: &mut MomentCache) -> Result<()> {
        self.update_zeta(state, cache)?;
        cache.refresh_zeta(state)?;
        self.update_nu(state, cache)?;
        cache.refresh_nu(state, self.designs)?;
        let sigma_eps: Vec<InvChiSqNatural> = (0..self.designs.p())
            .map(|j| message_to_sigma_eps(cache, self.designs, j))
            .collect::<Result<_>>()?;
        let data_msgs = self.penalty_to_variances(cache, &sigma_eps);
        self.update_variances(state, cache, &data_msgs);
        cache.refresh_variances(state)?;
        self.update_aux(state, cache);
        cache.refresh_variances(state)?;
        Ok(())
    }

    /// One message-passing iteration. The likelihood fragment fires twice
    /// from fresh snapshots: first toward the scores, then toward the
    /// coefficients and noise variances; the remaining factors follow in
    /// graph order. Leaves `cache` fresh.
    fn vmp_iteration(&self, state: &mut VariationalState, cache: &mut MomentCache) -> Result<VmpMessages> {
        let lik_to_zeta = self.update_zeta(state, cache)?;
        cache.refresh_zeta(state)?;

        let lik_sigma: Vec<InvChiSqNatural> = (0..self.designs.p())
            .map(|j| message_to_sigma_eps(cache, self.designs, j))
            .collect::<Result<_>>()?;
        let (lik_to_nu, pen_to_nu) = self.update_nu(state, cache)?;
        cache.refresh_nu(state, self.designs)?;

        let to_sigma = self.penalty_to_variances(cache, &lik_sigma);
        let iter_to_sigma = self.update_variances(state, cache, &to_sigma);
        cache.refresh_variances(state)?;
        let iter_to_aux = self.update_aux(state, cache);
        cache.refresh_variances(state)?;
        Ok(VmpMessages {
            lik_to_nu,
            pen_to_nu,
            lik_to_zeta,
            prior_to_zeta: self.prior.zeta.clone(),
            to_sigma,
            iter_to_sigma,
            iter_to_aux,
            prior_to_aux: self.prior.aux,
        })
    }
}

fn check_inputs(data: &FunctionalDataset, bases: &[SplineBasis], hyper: &Hyperparameters) -> Result<()> {
    hyper.validate()?;
    let report = crate::dataset::validate(data);
    if !report.is_valid() {
        return Err(Error::Validation(report.failures));
    }
    if bases.len() != data.p() {
        return Err(Error::Shape(format!(
            "{} spline bases for {} variables",
            bases.len(),
            data.p()
        )));
    }
    Ok(())
}

fn run(engine: Engine, data: &FunctionalDataset, bases: &[SplineBasis], hyper: &Hyperparameters) -> Result<RawFit> {
    check_inputs(data, bases, hyper)?;
    let designs = Designs::new(data, bases)?;
    let mut state = initialize_state(data, &designs, hyper)?;
    let mut cache = refresh_moments(&state, &designs)?;
    let driver = Driver {
        designs: &designs,
        hyper,
        prior: prior_natural_params(hyper),
    };
    let decrease_tol = match engine {
        Engine::Mfvb => MFVB_DECREASE_TOL,
        Engine::Vmp => VMP_DECREASE_TOL,
    };

    let mut converged = false;
    let mut messages = None;
    let mut previous: Option<f64> = None;
    for it in 1..=driver.hyper.max_iter {
        match engine {
            Engine::Mfvb => driver.mfvb_sweep(&mut state, &mut cache)?,
            Engine::Vmp => messages = Some(driver.vmp_iteration(&mut state, &mut cache)?),
        }
        let value = elbo(&state, &cache, &designs, hyper)?;
        state.elbo_trace.push(value);
        state.iteration = it;
        if let Some(prev) = previous {
            let rel = (value - prev) / prev.abs();
            if rel < -decrease_tol {
                return Err(Error::ElboDecrease {
                    iteration: it,
                    previous: prev,
                    current: value,
                });
            }
            if rel < 0.0 {
                debug!("{engine}: ELBO dipped by {:e} (relative) at iteration {it}", -rel);
            }
            if rel.abs() < hyper.tau {
                converged = true;
                break;
            }
        }
        previous = Some(value);
    }
    if !converged {
        warn!("{engine}: no convergence after {} iterations", hyper.max_iter);
    }
    Ok(RawFit {
        elbo_trace: state.elbo_trace.clone(),
        iterations: state.iteration,
        state,
        cache,
        converged,
        engine,
        fingerprint: data.fingerprint(),
        ks: bases.iter().map(SplineBasis::k).collect(),
        hyper: hyper.clone(),
        subject_ids: data.subject_ids().to_vec(),
        variable_names: data.variable_names().to_vec(),
        time_range: data.time_range(),
        messages,
    })
}

/// Mean-field coordinate ascent.
pub fn fit_mfvb(data: &FunctionalDataset, bases: &[SplineBasis], hyper: &Hyperparameters) -> Result<RawFit> {
    run(Engine::Mfvb, data, bases, hyper)
}

/// Variational message passing on the factor graph.
pub fn fit_vmp(data: &FunctionalDataset, bases: &[SplineBasis], hyper: &Hyperparameters) -> Result<RawFit> {
    run(Engine::Vmp, data, bases, hyper)
}

pub fn fit(engine: Engine, data: &FunctionalDataset, bases: &[SplineBasis], hyper: &Hyperparameters) -> Result<RawFit> {
    run(engine, data, bases, hyper)
}
