//! Model specification, variational state and moment cache.
//!
//! For variable `j` the coefficient vector `nu^(j) = (nu_mu, nu_psi_1, ...,
//! nu_psi_L)` stacks `L + 1` blocks of length `d_j = K_j + 2`, each ordered
//! as `(beta_0, beta_1, u_1, ..., u_K)`. Every variance (noise, mean
//! smoothing, one per component) sits in a numbered slot with its own
//! half-Cauchy auxiliary: slot 0 is the noise, slot 1 the mean, slot
//! `1 + l` component `l`.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};
use crate::expfam::{gauss_from_natural, invchisq_to_natural, GaussianForm, GaussianNatural, InvChiSqNatural};
use crate::splines::SplineBasis;

pub const SLOT_EPS: usize = 0;
pub const SLOT_MU: usize = 1;

/// Slot of component `l` (1-based).
pub const fn slot_psi(l: usize) -> usize {
    1 + l
}

/// Variance slot penalizing coefficient block `a` (0 = mean, `l` = component `l`).
pub const fn slot_of_block(a: usize) -> usize {
    1 + a
}

const INIT_COV: f64 = 0.1;
const INIT_PSI_SD: f64 = 0.1;
/// Ridge of the pooled mean fit, relative to the mean diagonal of `C'C`.
const INIT_RIDGE: f64 = 1e-10;
const INIT_XI: f64 = 2.0;
const INIT_LAMBDA: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    /// Prior standard deviation of the intercept and slope coefficients.
    pub sigma_beta: f64,
    /// Half-Cauchy scale of every standard deviation.
    pub a: f64,
    /// Number of latent components used for inference.
    pub l: usize,
    /// Relative ELBO change below which iteration stops.
    pub tau: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            sigma_beta: 1e5,
            a: 1e5,
            l: 2,
            tau: 1e-5,
            max_iter: 500,
            seed: 1,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.sigma_beta > 0.0 && self.sigma_beta.is_finite()) {
            bad.push(format!("sigma_beta must be positive, got {}", self.sigma_beta));
        }
        if !(self.a > 0.0 && self.a.is_finite()) {
            bad.push(format!("A must be positive, got {}", self.a));
        }
        if self.l < 1 {
            bad.push("L must be at least 1".to_string());
        }
        if !(self.tau > 0.0) {
            bad.push(format!("tau must be positive, got {}", self.tau));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let h: Self = serde_json::from_str(&text)?;
        h.validate()?;
        Ok(h)
    }
}

/// Sufficient statistics of one variable, fixed for the whole fit.
#[derive(Debug, Clone)]
pub struct DesignBlock {
    /// `K_j + 2`.
    pub d: usize,
    pub counts: Vec<usize>,
    pub total: usize,
    /// `C_i' C_i`.
    pub g: Vec<DMatrix<f64>>,
    /// Row `i` is `vec(C_i' C_i)`.
    pub g_stack: DMatrix<f64>,
    /// Column `i` is `C_i' x_i`.
    pub cx: DMatrix<f64>,
    /// `x_i' x_i`.
    pub xx: DVector<f64>,
}

impl DesignBlock {
    pub fn k(&self) -> usize {
        self.d - 2
    }
}

/// Precomputed `C'C`, `C'x` and `x'x` for every subject and variable.
#[derive(Debug, Clone)]
pub struct Designs {
    pub n: usize,
    pub blocks: Vec<DesignBlock>,
}

impl Designs {
    pub fn new(data: &FunctionalDataset, bases: &[SplineBasis]) -> Result<Self> {
        if bases.len() != data.p() {
            return Err(Error::Shape(format!(
                "{} spline bases for {} variables",
                bases.len(),
                data.p()
            )));
        }
        let n = data.n();
        let blocks = bases
            .iter()
            .enumerate()
            .map(|(j, basis)| {
                let d = basis.ncols();
                let mut g_stack = DMatrix::zeros(n, d * d);
                let mut cx = DMatrix::zeros(d, n);
                let mut xx = DVector::zeros(n);
                let mut g = Vec::with_capacity(n);
                let mut counts = Vec::with_capacity(n);
                for i in 0..n {
                    let s = data.series(i, j);
                    let c = basis.design_matrix(&s.t)?;
                    let x = DVector::from_column_slice(&s.x);
                    let gi = c.tr_mul(&c);
                    g_stack.row_mut(i).copy_from_slice(gi.as_slice());
                    cx.set_column(i, &c.tr_mul(&x));
                    xx[i] = x.dot(&x);
                    g.push(gi);
                    counts.push(s.len());
                }
                Ok(DesignBlock {
                    d,
                    total: counts.iter().sum(),
                    counts,
                    g,
                    g_stack,
                    cx,
                    xx,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { n, blocks })
    }

    pub fn p(&self) -> usize {
        self.blocks.len()
    }
}

/// Natural parameters of every factor of the mean-field approximation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub l: usize,
    /// `q(nu^(j))`, vec form, dimension `(L + 1) d_j`.
    pub nu: Vec<GaussianNatural>,
    /// `q(zeta_i)`, vech form, dimension `L`.
    pub zeta: Vec<GaussianNatural>,
    /// `q(sigma^2)` per variable and slot.
    pub sigma2: Vec<Vec<InvChiSqNatural>>,
    /// `q(a)` per variable and slot.
    pub aux: Vec<Vec<InvChiSqNatural>>,
    pub elbo_trace: Vec<f64>,
    pub iteration: usize,
}

impl VariationalState {
    pub fn n(&self) -> usize {
        self.zeta.len()
    }

    pub fn p(&self) -> usize {
        self.nu.len()
    }

    pub fn n_slots(&self) -> usize {
        self.l + 2
    }

    /// Coefficient block length `d_j`.
    pub fn d(&self, j: usize) -> usize {
        self.nu[j].dim() / (self.l + 1)
    }

    pub fn check_dims(&self, designs: &Designs) -> Result<()> {
        let ok = self.p() == designs.p()
            && self.n() == designs.n
            && self
                .nu
                .iter()
                .zip(&designs.blocks)
                .all(|(nu, b)| nu.dim() == (self.l + 1) * b.d)
            && self.zeta.iter().all(|z| z.dim() == self.l)
            && self.sigma2.iter().chain(&self.aux).all(|s| s.len() == self.n_slots());
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(
                "variational state does not match the data dimensions".into(),
            ))
        }
    }
}

/// Fixed prior messages of the model.
#[derive(Debug, Clone)]
pub struct PriorMessages {
    /// `N(0, I_L)` for every score vector.
    pub zeta: GaussianNatural,
    /// `Inverse-χ²(1, 1/A²)` for every auxiliary variable.
    pub aux: InvChiSqNatural,
    /// `sigma_beta^2`, the fixed variance of intercepts and slopes.
    pub sigma_beta2: f64,
}

pub fn prior_natural_params(hyper: &Hyperparameters) -> PriorMessages {
    let l = hyper.l;
    PriorMessages {
        zeta: GaussianNatural::from_precision(DVector::zeros(l), &DMatrix::identity(l, l), GaussianForm::Vech),
        aux: InvChiSqNatural {
            eta1: -1.5,
            eta2: -0.5 / (hyper.a * hyper.a),
        },
        sigma_beta2: hyper.sigma_beta * hyper.sigma_beta,
    }
}

/// Initial state: pooled ridge fit for the mean, small random latent
/// functions, unit score posteriors and `(2, 2)` variance factors.
pub fn initialize_state(
    data: &FunctionalDataset,
    designs: &Designs,
    hyper: &Hyperparameters,
) -> Result<VariationalState> {
    hyper.validate()?;
    let l = hyper.l;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let psi_draw = Normal::new(0.0, INIT_PSI_SD).expect("positive sd");
    let mut nu = Vec::with_capacity(designs.p());
    for (j, block) in designs.blocks.iter().enumerate() {
        let d = block.d;
        let mut mean = DVector::zeros((l + 1) * d);
        if block.total >= d {
            let mut gram = DMatrix::zeros(d, d);
            for gi in &block.g {
                gram += gi;
            }
            let ridge = INIT_RIDGE * gram.trace() / d as f64;
            for k in 0..d {
                gram[(k, k)] += ridge;
            }
            let rhs: DVector<f64> = block.cx.column_sum();
            match gram.cholesky() {
                Some(chol) => mean.rows_mut(0, d).copy_from(&chol.solve(&rhs)),
                None => warn!(
                    "variable {}: pooled design is singular, mean initialized at zero",
                    data.variable_names()[j]
                ),
            }
        } else {
            warn!(
                "variable {}: {} pooled observations for {d} coefficients, mean initialized at zero",
                data.variable_names()[j],
                block.total
            );
        }
        for v in mean.rows_mut(d, l * d).iter_mut() {
            *v = psi_draw.sample(&mut rng);
        }
        let precision = DMatrix::identity((l + 1) * d, (l + 1) * d) / INIT_COV;
        nu.push(GaussianNatural::from_precision(
            &precision * &mean,
            &precision,
            GaussianForm::Vec,
        ));
    }
    let zeta_prior = prior_natural_params(hyper).zeta;
    let var_init = invchisq_to_natural(INIT_XI, INIT_LAMBDA)?;
    Ok(VariationalState {
        l,
        nu,
        zeta: vec![zeta_prior; data.n()],
        sigma2: vec![vec![var_init; l + 2]; data.p()],
        aux: vec![vec![var_init; l + 2]; data.p()],
        elbo_trace: Vec::new(),
        iteration: 0,
    })
}

/// Moments of `q(nu^(j))`.
#[derive(Debug, Clone)]
pub struct NuMoments {
    pub d: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub log_det_cov: f64,
    /// Column `b (L + 1) + a` is `vec(E[nu_a nu_b'])`.
    pub m_stack: DMatrix<f64>,
}

impl NuMoments {
    /// `E(V) = [E nu_mu, E nu_psi_1, ...]`, `d x (L + 1)`.
    pub fn v(&self) -> DMatrix<f64> {
        let l1 = self.mean.len() / self.d;
        DMatrix::from_column_slice(self.d, l1, self.mean.as_slice())
    }

    /// `E ||w||^2` for entries `offset..offset + len` of block `a`.
    pub fn block_sq(&self, a: usize, offset: usize, len: usize) -> f64 {
        let start = a * self.d + offset;
        let m = self.mean.rows(start, len);
        m.dot(&m) + (0..len).map(|k| self.cov[(start + k, start + k)]).sum::<f64>()
    }
}

/// Moments of `q(zeta_i)` and of `zeta~_i = (1, zeta_i)`.
#[derive(Debug, Clone)]
pub struct ZetaMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub log_det_cov: f64,
    pub tilde_mean: DVector<f64>,
    /// `E(zeta~ zeta~') = Cov(zeta~) + E(zeta~) E(zeta~)'`.
    pub tilde_second: DMatrix<f64>,
}

impl ZetaMoments {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, log_det_cov: f64) -> Self {
        let l = mean.len();
        let mut tilde_mean = DVector::zeros(l + 1);
        tilde_mean[0] = 1.0;
        tilde_mean.rows_mut(1, l).copy_from(&mean);
        let mut tilde_second = &tilde_mean * tilde_mean.transpose();
        let mut inner = tilde_second.view_mut((1, 1), (l, l));
        inner += &cov;
        Self {
            mean,
            cov,
            log_det_cov,
            tilde_mean,
            tilde_second,
        }
    }

    /// `N(0, I_L)`.
    pub fn standard(l: usize) -> Self {
        Self::new(DVector::zeros(l), DMatrix::identity(l, l), 0.0)
    }
}

/// Every expectation the updates and the ELBO need, for one state snapshot.
#[derive(Debug, Clone)]
pub struct MomentCache {
    pub l: usize,
    pub nu: Vec<NuMoments>,
    pub zeta: Vec<ZetaMoments>,
    /// Per variable, row `i` is `vec(E H_i)` with `E H_i` of order `L + 1`:
    /// entry `(0, 0)` is `E h_mu`, `(0, l)` is `E h_mupsi_l`, `(l, l')` is `E H_psi`.
    pub h: Vec<DMatrix<f64>>,
    /// Per variable, column `i` is `E(V)' C_i' x_i`.
    pub vcx: Vec<DMatrix<f64>>,
    /// `E(1/sigma^2)` per variable and slot.
    pub e_inv_sigma2: Vec<Vec<f64>>,
    /// `E(1/a)` per variable and slot.
    pub e_inv_aux: Vec<Vec<f64>>,
}

fn nu_moments(eta: &GaussianNatural, l: usize, j: usize) -> Result<NuMoments> {
    let m = gauss_from_natural(eta).map_err(|e| Error::Numerical(format!("q(nu^({})): {e}", j + 1)))?;
    let d = m.mean.len() / (l + 1);
    Ok(NuMoments::from_mean_cov(m.mean, m.cov, m.log_det_cov, d))
}

impl NuMoments {
    pub fn from_mean_cov(mean: DVector<f64>, cov: DMatrix<f64>, log_det_cov: f64, d: usize) -> Self {
        let l1 = mean.len() / d;
        let cov = (&cov + cov.transpose()) * 0.5;
        let second = &cov + &mean * mean.transpose();
        let mut m_stack = DMatrix::zeros(d * d, l1 * l1);
        for b in 0..l1 {
            for a in 0..l1 {
                let block = second.view((a * d, b * d), (d, d));
                let mut col = m_stack.column_mut(b * l1 + a);
                for (k, v) in block.iter().enumerate() {
                    col[k] = *v;
                }
            }
        }
        Self {
            d,
            mean,
            cov,
            log_det_cov,
            m_stack,
        }
    }
}

fn zeta_moments(eta: &GaussianNatural, i: usize) -> Result<ZetaMoments> {
    let m = gauss_from_natural(eta).map_err(|e| Error::Numerical(format!("q(zeta_{}): {e}", i + 1)))?;
    let cov = (&m.cov + m.cov.transpose()) * 0.5;
    Ok(ZetaMoments::new(m.mean, cov, m.log_det_cov))
}

fn reciprocals(rows: &[Vec<InvChiSqNatural>], what: &str) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .enumerate()
        .map(|(j, row)| {
            row.iter()
                .enumerate()
                .map(|(s, eta)| {
                    eta.mean_reciprocal()
                        .map_err(|e| Error::Numerical(format!("q({what}) variable {} slot {s}: {e}", j + 1)))
                })
                .collect()
        })
        .collect()
}

/// Moments of a state from scratch.
pub fn refresh_moments(state: &VariationalState, designs: &Designs) -> Result<MomentCache> {
    state.check_dims(designs)?;
    let l = state.l;
    let mut cache = MomentCache {
        l,
        nu: Vec::new(),
        zeta: Vec::new(),
        h: Vec::new(),
        vcx: Vec::new(),
        e_inv_sigma2: Vec::new(),
        e_inv_aux: Vec::new(),
    };
    cache.refresh_zeta(state)?;
    cache.refresh_nu(state, designs)?;
    cache.refresh_variances(state)?;
    Ok(cache)
}

/// Moments of a state without the data summaries `h` and `vcx`, which stay
/// empty; enough for prediction and post-processing.
pub fn state_moments(state: &VariationalState) -> Result<MomentCache> {
    let l = state.l;
    let mut cache = MomentCache {
        l,
        nu: state
            .nu
            .iter()
            .enumerate()
            .map(|(j, eta)| nu_moments(eta, l, j))
            .collect::<Result<_>>()?,
        zeta: Vec::new(),
        h: Vec::new(),
        vcx: Vec::new(),
        e_inv_sigma2: Vec::new(),
        e_inv_aux: Vec::new(),
    };
    cache.refresh_zeta(state)?;
    cache.refresh_variances(state)?;
    Ok(cache)
}

impl MomentCache {
    /// Recomputes every `q(zeta_i)` moment.
    pub fn refresh_zeta(&mut self, state: &VariationalState) -> Result<()> {
        self.zeta = state
            .zeta
            .par_iter()
            .enumerate()
            .map(|(i, eta)| zeta_moments(eta, i))
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// Recomputes `q(nu)` moments and the `E H_i`, `E(V)'C'x` summaries.
    pub fn refresh_nu(&mut self, state: &VariationalState, designs: &Designs) -> Result<()> {
        let l = state.l;
        self.nu = state
            .nu
            .par_iter()
            .enumerate()
            .map(|(j, eta)| nu_moments(eta, l, j))
            .collect::<Result<_>>()?;
        self.refresh_summaries(designs);
        Ok(())
    }

    /// Recomputes `E H_i` and `E(V)'C'x` from the current `nu` moments.
    pub fn refresh_summaries(&mut self, designs: &Designs) {
        self.h = self
            .nu
            .iter()
            .zip(&designs.blocks)
            .map(|(m, b)| &b.g_stack * &m.m_stack)
            .collect();
        self.vcx = self
            .nu
            .iter()
            .zip(&designs.blocks)
            .map(|(m, b)| m.v().tr_mul(&b.cx))
            .collect();
    }

    /// Cache from explicit moments; all variances and auxiliaries get the
    /// given reciprocal expectations.
    pub fn from_moments(
        nu: Vec<NuMoments>,
        zeta: Vec<ZetaMoments>,
        designs: &Designs,
        e_inv_sigma2: Vec<Vec<f64>>,
        e_inv_aux: Vec<Vec<f64>>,
    ) -> Self {
        let l = zeta
            .first()
            .map(|z| z.mean.len())
            .unwrap_or_else(|| nu[0].mean.len() / nu[0].d - 1);
        let mut cache = Self {
            l,
            nu,
            zeta,
            h: Vec::new(),
            vcx: Vec::new(),
            e_inv_sigma2,
            e_inv_aux,
        };
        cache.refresh_summaries(designs);
        cache
    }

    pub fn refresh_variances(&mut self, state: &VariationalState) -> Result<()> {
        self.e_inv_sigma2 = reciprocals(&state.sigma2, "sigma^2")?;
        self.e_inv_aux = reciprocals(&state.aux, "a")?;
        Ok(())
    }

    /// `E H_i^(j)` as an `(L + 1) x (L + 1)` matrix.
    pub fn h_matrix(&self, j: usize, i: usize) -> DMatrix<f64> {
        let l1 = self.l + 1;
        DMatrix::from_iterator(l1, l1, self.h[j].row(i).iter().copied())
    }

    /// `E ||x_i - C_i V zeta~_i||^2` for variable `j`.
    pub fn expected_rss(&self, designs: &Designs, j: usize, i: usize) -> f64 {
        let z = &self.zeta[i];
        let cross = z.tilde_mean.dot(&self.vcx[j].column(i));
        let quad = self.h_matrix(j, i).component_mul(&z.tilde_second).sum();
        designs.blocks[j].xx[i] - 2.0 * cross + quad
    }
}
