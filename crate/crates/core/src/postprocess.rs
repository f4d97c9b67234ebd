//! Orthonormalization of a raw fit into eigenfunctions and scores.
//!
//! The raw fit represents subject `i` as `mu + Psi E(zeta_i)` with latent
//! functions `Psi` that are neither orthogonal nor identified. With `W` the
//! trapezoidal weights on the grid, the SVD `W^{1/2} Psi = U_w D V'` gives
//! H-orthonormal columns `U = W^{-1/2} U_w`; the spectral decomposition of
//! the sample covariance of `Xi V D` then rotates them into uncorrelated,
//! variance-ordered scores. The reconstruction `Psi Xi'` is unchanged.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engines::{Engine, RawFit};
use crate::error::{Error, Result};
use crate::splines::{bases_for, design_matrix, EvaluationGrid, SplineBasis};

/// Eigenvalues at or below this are reported as degenerate.
pub const NEAR_ZERO_EIGENVALUE: f64 = 1e-12;
pub const BAND_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrthonormalizedFit {
    pub grid: EvaluationGrid,
    pub subject_ids: Vec<String>,
    pub variable_names: Vec<String>,
    /// `mu^(j)` on the grid.
    pub mean: Vec<DVector<f64>>,
    /// Column `l` stacks `psi_l^(1), ..., psi_l^(p)` on the grid.
    pub eigenfunctions: DMatrix<f64>,
    /// `n x L` posterior-mean scores.
    pub scores: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub pve: Vec<f64>,
    /// Posterior covariance of each subject's orthonormalized scores.
    pub score_cov: Vec<DMatrix<f64>>,
    /// `M` with `scores_i = M' E(zeta_i)`.
    pub transport: DMatrix<f64>,
    pub near_zero: Vec<bool>,
    pub engine: Engine,
}

impl OrthonormalizedFit {
    pub fn n(&self) -> usize {
        self.scores.nrows()
    }

    pub fn p(&self) -> usize {
        self.mean.len()
    }

    pub fn l(&self) -> usize {
        self.eigenfunctions.ncols()
    }

    /// `psi_l^(j)` on the grid (0-based `l`).
    pub fn eigenfunction(&self, l: usize, j: usize) -> DVector<f64> {
        let ng = self.grid.len();
        self.eigenfunctions.column(l).rows(j * ng, ng).into_owned()
    }

    /// `mu + sum_l scores_il psi_l`, stacked over variables.
    pub fn reconstruct(&self, i: usize) -> DVector<f64> {
        stack(&self.mean) + &self.eigenfunctions * self.scores.row(i).transpose()
    }

    /// Matrix of H inner products between eigenfunctions.
    pub fn h_gram(&self) -> DMatrix<f64> {
        let w = stacked_weights(&self.grid, self.p());
        let weighted = DMatrix::from_fn(w.len(), self.l(), |r, c| w[r] * self.eigenfunctions[(r, c)]);
        self.eigenfunctions.tr_mul(&weighted)
    }

    pub fn score_sd(&self, i: usize) -> DVector<f64> {
        self.score_cov[i].diagonal().map(|v| v.max(0.0).sqrt())
    }

    /// The leading `l` components; eigenvalues and PVE keep the full scree.
    pub fn truncated(&self, l: usize) -> Result<Self> {
        if l < 1 || l > self.l() {
            return Err(Error::Domain(format!("cannot keep {l} of {} components", self.l())));
        }
        Ok(Self {
            eigenfunctions: self.eigenfunctions.columns(0, l).into_owned(),
            scores: self.scores.columns(0, l).into_owned(),
            score_cov: self
                .score_cov
                .iter()
                .map(|c| c.view((0, 0), (l, l)).into_owned())
                .collect(),
            transport: self.transport.columns(0, l).into_owned(),
            ..self.clone()
        })
    }
}

fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(
        parts.iter().map(|v| v.len()).sum(),
        parts.iter().flat_map(|v| v.iter().copied()),
    )
}

/// Trapezoidal weights repeated once per variable.
pub fn stacked_weights(grid: &EvaluationGrid, p: usize) -> DVector<f64> {
    let w = grid.weights();
    DVector::from_iterator(p * w.len(), (0..p).flat_map(|_| w.iter().copied()))
}

/// `<f, g>_H = sum_j ∫ f^(j) g^(j)` by the trapezoidal rule, for vectors
/// stacking `p` variables on `grid`.
pub fn h_inner(f: &DVector<f64>, g: &DVector<f64>, grid: &EvaluationGrid) -> Result<f64> {
    let ng = grid.len();
    if f.len() != g.len() || ng == 0 || f.len() % ng != 0 {
        return Err(Error::Shape(format!(
            "inner product of lengths {} and {} on a grid of {ng}",
            f.len(),
            g.len()
        )));
    }
    let w = stacked_weights(grid, f.len() / ng);
    Ok(f.iter().zip(g.iter()).zip(w.iter()).map(|((a, b), w)| a * b * w).sum())
}

/// Grid values of the raw mean (per variable) and latent functions (stacked).
pub fn raw_functions(raw: &RawFit, bases: &[SplineBasis], grid: &EvaluationGrid) -> (Vec<DVector<f64>>, DMatrix<f64>) {
    let l = raw.l();
    let ng = grid.len();
    let mut mean = Vec::with_capacity(raw.p());
    let mut psi = DMatrix::zeros(raw.p() * ng, l);
    for (j, basis) in bases.iter().enumerate() {
        let cg = grid.design(basis);
        let v = raw.cache.nu[j].v();
        let vals = &cg * v;
        mean.push(vals.column(0).into_owned());
        psi.view_mut((j * ng, 0), (ng, l)).copy_from(&vals.columns(1, l));
    }
    (mean, psi)
}

/// `n x L` matrix of posterior score means.
pub fn raw_scores(raw: &RawFit) -> DMatrix<f64> {
    let l = raw.l();
    DMatrix::from_fn(raw.n(), l, |i, c| raw.cache.zeta[i].mean[c])
}

fn sample_covariance(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let means = a.row_mean();
    let centered = DMatrix::from_fn(n, a.ncols(), |r, c| a[(r, c)] - means[c]);
    centered.tr_mul(&centered) / (n as f64 - 1.0)
}

pub fn orthonormalize(raw: &RawFit, n_g: usize) -> Result<OrthonormalizedFit> {
    let grid = EvaluationGrid::new(n_g)?;
    let bases = bases_for(&raw.ks)?;
    orthonormalize_on(raw, &bases, &grid)
}

pub fn orthonormalize_on(raw: &RawFit, bases: &[SplineBasis], grid: &EvaluationGrid) -> Result<OrthonormalizedFit> {
    let (l, n, p) = (raw.l(), raw.n(), raw.p());
    if n < 2 {
        return Err(Error::Domain(format!(
            "score covariance needs at least two subjects, got {n}"
        )));
    }
    let (mean, psi) = raw_functions(raw, bases, grid);
    let xi = raw_scores(raw);

    let sqrt_w = stacked_weights(grid, p).map(f64::sqrt);
    let psi_w = DMatrix::from_fn(psi.nrows(), l, |r, c| sqrt_w[r] * psi[(r, c)]);
    let svd = psi_w.svd(true, true);
    let u_w = svd
        .u
        .ok_or_else(|| Error::Numerical("SVD of latent functions failed".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numerical("SVD of latent functions failed".into()))?;
    let u = DMatrix::from_fn(u_w.nrows(), u_w.ncols(), |r, c| u_w[(r, c)] / sqrt_w[r]);
    let vd = v_t.transpose() * DMatrix::from_diagonal(&svd.singular_values);

    let a = &xi * &vd;
    let eig = sample_covariance(&a).symmetric_eigen();
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let q = DMatrix::from_fn(l, l, |r, c| eig.eigenvectors[(r, order[c])]);
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();

    let eigenfunctions = u * &q;
    let transport = vd * &q;
    let scores = &xi * &transport;
    let score_cov = raw
        .cache
        .zeta
        .iter()
        .map(|z| {
            let c = transport.tr_mul(&z.cov) * &transport;
            (&c + c.transpose()) * 0.5
        })
        .collect();
    let near_zero = eigenvalues.iter().map(|&v| v <= NEAR_ZERO_EIGENVALUE).collect();
    let pve = shares(&eigenvalues).unwrap_or_else(|_| vec![0.0; l]);

    let fit = OrthonormalizedFit {
        grid: grid.clone(),
        subject_ids: raw.subject_ids.clone(),
        variable_names: raw.variable_names.clone(),
        mean,
        eigenfunctions,
        scores,
        eigenvalues,
        pve,
        score_cov,
        transport,
        near_zero,
        engine: raw.engine,
    };
    Ok(align_signs(fit))
}

/// `max |<psi_l, psi_l'>_H - delta_ll'|`.
pub fn orthonormality_error(fit: &OrthonormalizedFit) -> f64 {
    let l = fit.l();
    (fit.h_gram() - DMatrix::identity(l, l)).amax()
}

/// Largest grid discrepancy between the raw and the orthonormalized
/// reconstructions of every subject's curves.
pub fn reconstruction_error(raw: &RawFit, bases: &[SplineBasis], fit: &OrthonormalizedFit) -> f64 {
    let (mean, psi) = raw_functions(raw, bases, &fit.grid);
    let xi = raw_scores(raw);
    let mu = stack(&mean);
    (0..raw.n())
        .map(|i| (&mu + &psi * xi.row(i).transpose() - fit.reconstruct(i)).amax())
        .fold(0.0, f64::max)
}

/// Makes the largest-magnitude entry of every eigenfunction positive,
/// flipping the matching score column; the earliest index wins ties.
pub fn align_signs(mut fit: OrthonormalizedFit) -> OrthonormalizedFit {
    for c in 0..fit.l() {
        let col = fit.eigenfunctions.column(c);
        let mut best = 0;
        for (r, v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() {
                best = r;
            }
        }
        if col[best] < 0.0 {
            flip(&mut fit, c);
        }
    }
    fit
}

/// Negates component `c` everywhere it appears.
pub fn flip(fit: &mut OrthonormalizedFit, c: usize) {
    fit.eigenfunctions.column_mut(c).neg_mut();
    fit.scores.column_mut(c).neg_mut();
    fit.transport.column_mut(c).neg_mut();
    for cov in fit.score_cov.iter_mut() {
        cov.row_mut(c).neg_mut();
        cov.column_mut(c).neg_mut();
    }
}

fn shares(values: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Domain("all eigenvalues are zero".into()));
    }
    Ok(values.iter().map(|v| v / total).collect())
}

/// `lambda_l / sum lambda`.
pub fn pve(fit: &OrthonormalizedFit) -> Result<Vec<f64>> {
    shares(&fit.eigenvalues)
}

/// One variable of a predicted trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBand {
    pub t: Vec<f64>,
    pub estimate: Vec<f64>,
    pub lo95: Vec<f64>,
    pub hi95: Vec<f64>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Point estimate `mu + Psi E(zeta_i)` at `times` with pointwise 95% bands
/// from `samples` joint draws of `(nu, zeta_i)` under `q`.
///
/// Draws use a per-subject stream of a generator seeded with `seed`.
pub fn predict_trajectory(
    raw: &RawFit,
    bases: &[SplineBasis],
    i: usize,
    times: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<TrajectoryBand>> {
    if i >= raw.n() {
        return Err(Error::Domain(format!(
            "subject index {i} out of range (n = {})",
            raw.n()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    let l = raw.l();
    let zeta = &raw.cache.zeta[i];
    let z_chol = zeta
        .cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("q(zeta_{}) covariance is not positive definite", i + 1)))?
        .l();
    let mut out = Vec::with_capacity(raw.p());
    for (j, basis) in bases.iter().enumerate() {
        let c = design_matrix(basis, times)?;
        let nu = &raw.cache.nu[j];
        let mut tilde = DVector::from_element(l + 1, 1.0);
        tilde.rows_mut(1, l).copy_from(&zeta.mean);
        let estimate = &c * nu.v() * &tilde;

        let nu_chol = nu
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical(format!("q(nu^({})) covariance is not positive definite", j + 1)))?
            .l();
        let dim = nu.mean.len();
        let mut draws = DMatrix::zeros(times.len(), samples);
        for s in 0..samples {
            let e = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let nu_s = &nu.mean + &nu_chol * e;
            let e = DVector::from_fn(l, |_, _| rng.sample::<f64, _>(StandardNormal));
            let z_s = &zeta.mean + &z_chol * e;
            let mut zt = DVector::from_element(l + 1, 1.0);
            zt.rows_mut(1, l).copy_from(&z_s);
            let v = DMatrix::from_column_slice(nu.d, l + 1, nu_s.as_slice());
            draws.set_column(s, &(&c * v * zt));
        }
        let mut lo95 = Vec::with_capacity(times.len());
        let mut hi95 = Vec::with_capacity(times.len());
        for r in 0..times.len() {
            let mut row: Vec<f64> = draws.row(r).iter().copied().collect();
            row.sort_by(f64::total_cmp);
            lo95.push(percentile(&row, 0.025).min(estimate[r]));
            hi95.push(percentile(&row, 0.975).max(estimate[r]));
        }
        out.push(TrajectoryBand {
            t: times.to_vec(),
            estimate: estimate.as_slice().to_vec(),
            lo95,
            hi95,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engines::fit_mfvb;
    use crate::model::Hyperparameters;
    use crate::simulate::tests_support::small_dataset;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn small_fit(seed: u64) -> (RawFit, Vec<SplineBasis>) {
        let data = small_dataset(25, 2, seed);
        let bases = bases_for(&[6, 7]).unwrap();
        let hyper = Hyperparameters {
            l: 3,
            max_iter: 40,
            seed,
            ..Default::default()
        };
        (fit_mfvb(&data, &bases, &hyper).unwrap(), bases)
    }

    #[test]
    fn h_inner_examples() {
        let grid = EvaluationGrid::new(1000).unwrap();
        let ones = DVector::from_element(4000, 1.0);
        let ip = h_inner(&ones, &ones, &grid).unwrap();
        assert!((ip - 4.0).abs() < 1e-12);
        assert!((ip.sqrt() - 2.0).abs() < 1e-12);
        let f = DVector::from_iterator(1000, grid.t.iter().map(|t| 2f64.sqrt() * (2.0 * PI * t).cos()));
        let g = DVector::from_iterator(1000, grid.t.iter().map(|t| 2f64.sqrt() * (2.0 * PI * t).sin()));
        assert!((h_inner(&f, &f, &grid).unwrap().sqrt() - 1.0).abs() < 1e-5);
        assert!(h_inner(&f, &g, &grid).unwrap().abs() < 1e-5);
        assert!(h_inner(&f, &ones, &grid).is_err());
    }

    #[test]
    fn pve_examples() {
        assert_eq!(shares(&[4.0, 1.0]).unwrap(), vec![0.8, 0.2]);
        assert_eq!(shares(&[1.0, 1.0, 0.0]).unwrap(), vec![0.5, 0.5, 0.0]);
        assert!(matches!(shares(&[0.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn orthonormal_uncorrelated_and_invariant() {
        let (raw, bases) = small_fit(3);
        let grid = EvaluationGrid::new(1000).unwrap();
        let fit = orthonormalize_on(&raw, &bases, &grid).unwrap();
        let gram = fit.h_gram();
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-6);
        assert!(fit.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        assert!((fit.pve.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let corr = sample_covariance(&fit.scores);
        for r in 0..3 {
            for c in 0..3 {
                if r != c {
                    let rho = corr[(r, c)] / (corr[(r, r)] * corr[(c, c)]).sqrt();
                    assert!(rho.abs() < 1e-6);
                }
            }
            assert!((corr[(r, r)] - fit.eigenvalues[r]).abs() < 1e-9 * fit.eigenvalues[0]);
        }
        let (mean, psi) = raw_functions(&raw, &bases, &grid);
        let xi = raw_scores(&raw);
        for i in 0..raw.n() {
            let before = stack(&mean) + &psi * xi.row(i).transpose();
            assert!((before - fit.reconstruct(i)).amax() < 1e-8);
        }
    }

    #[test]
    fn sign_alignment_is_an_idempotent_involution() {
        let (raw, _) = small_fit(4);
        let fit = orthonormalize(&raw, 200).unwrap();
        let again = align_signs(fit.clone());
        assert_eq!(again.eigenfunctions, fit.eigenfunctions);
        let mut flipped = fit.clone();
        flip(&mut flipped, 1);
        let restored = align_signs(flipped.clone());
        assert_eq!(restored.eigenfunctions, fit.eigenfunctions);
        assert_eq!(restored.scores, fit.scores);
        for i in 0..fit.n() {
            assert!((flipped.reconstruct(i) - fit.reconstruct(i)).amax() < 1e-12);
        }
    }

    #[test]
    fn already_orthonormal_input_is_a_fixed_point() {
        let (raw, bases) = small_fit(6);
        let grid = EvaluationGrid::new(300).unwrap();
        let first = orthonormalize_on(&raw, &bases, &grid).unwrap();
        // feed the output back: latent functions = eigenfunctions, scores = scores
        let l = first.l();
        let mut again = raw.clone();
        // express eigenfunctions through the coefficient map: psi_hat = Psi V D^{-1} Q
        for j in 0..raw.p() {
            let nu = &raw.cache.nu[j];
            let v = nu.v();
            let mut new_v = v.clone();
            let coef = v.columns(1, l) * first.transport.clone().try_inverse().unwrap().transpose();
            new_v.columns_mut(1, l).copy_from(&coef);
            let mean = DVector::from_column_slice(new_v.as_slice());
            again.cache.nu[j] = crate::model::NuMoments::from_mean_cov(mean, nu.cov.clone(), 0.0, nu.d);
        }
        for i in 0..raw.n() {
            again.cache.zeta[i] =
                crate::model::ZetaMoments::new(first.scores.row(i).transpose(), first.score_cov[i].clone(), 0.0);
        }
        let second = orthonormalize_on(&again, &bases, &grid).unwrap();
        assert!((second.eigenfunctions - &first.eigenfunctions).amax() < 1e-8);
        assert!((second.scores - &first.scores).amax() < 1e-8);
    }

    #[test]
    fn prediction_matches_reconstruction_and_bands_bracket() {
        let (raw, bases) = small_fit(8);
        let grid = EvaluationGrid::new(100).unwrap();
        let fit = orthonormalize_on(&raw, &bases, &grid).unwrap();
        let pred = predict_trajectory(&raw, &bases, 2, &grid.t, 300, 1).unwrap();
        let recon = fit.reconstruct(2);
        for (j, band) in pred.iter().enumerate() {
            for r in 0..100 {
                assert!((band.estimate[r] - recon[j * 100 + r]).abs() < 1e-8);
                assert!(band.lo95[r] <= band.estimate[r] && band.estimate[r] <= band.hi95[r]);
            }
        }
        let again = predict_trajectory(&raw, &bases, 2, &grid.t, 300, 1).unwrap();
        assert_eq!(pred, again);
        assert!(predict_trajectory(&raw, &bases, 99, &grid.t, 10, 1).is_err());
    }

    #[test]
    fn zero_scores_predict_the_mean() {
        let (mut raw, bases) = small_fit(2);
        let l = raw.l();
        raw.cache.zeta[0] = crate::model::ZetaMoments::new(DVector::zeros(l), DMatrix::identity(l, l), 0.0);
        let grid = EvaluationGrid::new(50).unwrap();
        let pred = predict_trajectory(&raw, &bases, 0, &grid.t, 10, 3).unwrap();
        let (mean, _) = raw_functions(&raw, &bases, &grid);
        for j in 0..raw.p() {
            assert!((DVector::from_column_slice(&pred[j].estimate) - &mean[j]).amax() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn random_raw_fits_orthonormalize(seed in 0u64..500) {
            let (mut raw, _) = small_fit(1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for j in 0..raw.p() {
                let nu = &raw.cache.nu[j];
                let mean = nu.mean.map(|_| rng.random_range(-1.0..1.0));
                raw.cache.nu[j] = crate::model::NuMoments::from_mean_cov(mean, nu.cov.clone(), 0.0, nu.d);
            }
            for z in raw.cache.zeta.iter_mut() {
                let mean = z.mean.map(|_| rng.random_range(-2.0..2.0));
                *z = crate::model::ZetaMoments::new(mean, z.cov.clone(), 0.0);
            }
            let fit = orthonormalize(&raw, 400).unwrap();
            prop_assert!((fit.h_gram() - DMatrix::identity(3, 3)).amax() < 1e-6);
            prop_assert!(fit.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
            let aligned = align_signs(fit.clone());
            prop_assert_eq!(aligned.eigenfunctions, fit.eigenfunctions);
        }
    }
}
