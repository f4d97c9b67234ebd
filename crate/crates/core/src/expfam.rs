//! Exponential-family algebra for the two families the model needs: the
//! multivariate normal (in vec and vech natural parametrizations) and the
//! inverse-χ² distribution.
//!
//! Natural parameters are what variational messages carry; they add across
//! incoming messages and are mapped back to moments only when expectations
//! are needed.

use std::ops::{Add, AddAssign};

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Stacks the columns of `m` left to right.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`] for a square `d x d` result.
pub fn vec_inv(a: &DVector<f64>, d: usize) -> Result<DMatrix<f64>> {
    if a.len() != d * d {
        return Err(Error::Shape(format!(
            "vec_inv expects {} entries for d = {d}, got {}",
            d * d,
            a.len()
        )));
    }
    Ok(DMatrix::from_column_slice(d, d, a.as_slice()))
}

/// Stacks the on-and-below-diagonal part of each column of a square matrix.
pub fn vech(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    let d = m.nrows();
    if m.ncols() != d {
        return Err(Error::Shape(format!(
            "vech needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for c in 0..d {
        for r in c..d {
            out.push(m[(r, c)]);
        }
    }
    Ok(DVector::from_vec(out))
}

/// Dimension `d` with `d (d + 1) / 2 == len`, if one exists.
pub fn vech_dim(len: usize) -> Option<usize> {
    let d = (((8 * len + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    (d * (d + 1) / 2 == len).then_some(d)
}

/// Duplication matrix `D_d`: `D_d vech(A) = vec(A)` for symmetric `A`.
pub fn duplication(d: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(d * d, d * (d + 1) / 2);
    let mut k = 0;
    for c in 0..d {
        for r in c..d {
            out[(c * d + r, k)] = 1.0;
            out[(r * d + c, k)] = 1.0;
            k += 1;
        }
    }
    out
}

/// Moore-Penrose inverse `D_d^+ = (D_d' D_d)^{-1} D_d'`.
///
/// `D_d' D_d` is diagonal (1 for diagonal positions, 2 otherwise), so the
/// inverse is formed directly.
pub fn duplication_pinv(d: usize) -> DMatrix<f64> {
    let dup = duplication(d);
    let mut out = dup.transpose();
    for (k, mut row) in out.row_iter_mut().enumerate() {
        let count = dup.column(k).sum();
        row /= count;
    }
    out
}

/// Symmetric matrix `vec^{-1}(D_d^{+T} v)` for a vech-form vector `v`.
///
/// Equivalent to multiplying by the explicit pseudo-inverse but without
/// materializing it: diagonal entries are copied, off-diagonal ones halved.
pub fn unvech_half(v: &DVector<f64>, d: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(d, d);
    let mut k = 0;
    for c in 0..d {
        for r in c..d {
            if r == c {
                out[(r, c)] = v[k];
            } else {
                out[(r, c)] = 0.5 * v[k];
                out[(c, r)] = 0.5 * v[k];
            }
            k += 1;
        }
    }
    out
}

/// `D_d' vec(M)` for a square `M`, again without the explicit matrix.
pub fn dup_transpose_vec(m: &DMatrix<f64>) -> DVector<f64> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for c in 0..d {
        for r in c..d {
            if r == c {
                out.push(m[(r, c)]);
            } else {
                out.push(m[(r, c)] + m[(c, r)]);
            }
        }
    }
    DVector::from_vec(out)
}

/// Inverse and log-determinant of a symmetric positive-definite matrix.
///
/// On Cholesky failure a ridge of `1e-10 * trace / d` is added once and the
/// event logged; a second failure is reported with diagnostics.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, f64)> {
    let d = m.nrows();
    if d == 0 {
        return Ok((DMatrix::zeros(0, 0), 0.0));
    }
    let sym = (m + m.transpose()) * 0.5;
    if let Some(chol) = sym.clone().cholesky() {
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        return Ok((chol.inverse(), log_det));
    }
    let ridge = 1e-10 * sym.trace().abs().max(f64::MIN_POSITIVE) / d as f64;
    warn!("{what}: precision not positive definite, retrying with ridge {ridge:e}");
    let ridged = &sym + DMatrix::identity(d, d) * ridge;
    match ridged.cholesky() {
        Some(chol) => {
            let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            Ok((chol.inverse(), log_det))
        }
        None => {
            let eig = sym.symmetric_eigenvalues();
            let lo = eig.min();
            let hi = eig.max();
            Err(Error::Numerical(format!(
                "{what}: matrix of order {d} is not positive definite \
                 (eigenvalues in [{lo:e}, {hi:e}], trace {:e})",
                sym.trace()
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GaussianForm {
    Vec,
    Vech,
}

/// Natural parameters of a multivariate normal density.
///
/// In vec form `eta2 = -vec(P)/2` has `d^2` entries; in vech form
/// `eta2 = -D_d' vec(P)/2` has `d (d + 1) / 2`, where `P` is the precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianNatural {
    pub eta1: DVector<f64>,
    pub eta2: DVector<f64>,
    pub form: GaussianForm,
}

impl GaussianNatural {
    pub fn zeros(d: usize, form: GaussianForm) -> Self {
        let len2 = match form {
            GaussianForm::Vec => d * d,
            GaussianForm::Vech => d * (d + 1) / 2,
        };
        Self {
            eta1: DVector::zeros(d),
            eta2: DVector::zeros(len2),
            form,
        }
    }

    /// Builds the natural vector from `eta1` and the matrix `-2 unvec(eta2)`.
    pub fn from_precision(eta1: DVector<f64>, precision: &DMatrix<f64>, form: GaussianForm) -> Self {
        let eta2 = match form {
            GaussianForm::Vec => vec(precision) * -0.5,
            GaussianForm::Vech => dup_transpose_vec(precision) * -0.5,
        };
        Self { eta1, eta2, form }
    }

    pub fn dim(&self) -> usize {
        self.eta1.len()
    }

    /// `-2 vec^{-1}(eta2)` (vec form) or `-2 vec^{-1}(D^{+T} eta2)` (vech form).
    pub fn precision(&self) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let half = match self.form {
            GaussianForm::Vec => vec_inv(&self.eta2, d)?,
            GaussianForm::Vech => {
                if self.eta2.len() != d * (d + 1) / 2 {
                    return Err(Error::Shape(format!(
                        "vech natural vector of length {} does not match dimension {d}",
                        self.eta2.len()
                    )));
                }
                unvech_half(&self.eta2, d)
            }
        };
        Ok(half * -2.0)
    }

    pub fn to_form(&self, form: GaussianForm) -> Result<Self> {
        if form == self.form {
            return Ok(self.clone());
        }
        Ok(Self::from_precision(self.eta1.clone(), &self.precision()?, form))
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            eta1: &self.eta1 * c,
            eta2: &self.eta2 * c,
            form: self.form,
        }
    }
}

impl Add for &GaussianNatural {
    type Output = GaussianNatural;

    fn add(self, rhs: &GaussianNatural) -> GaussianNatural {
        assert_eq!(self.form, rhs.form, "adding natural vectors of different forms");
        GaussianNatural {
            eta1: &self.eta1 + &rhs.eta1,
            eta2: &self.eta2 + &rhs.eta2,
            form: self.form,
        }
    }
}

impl AddAssign<&GaussianNatural> for GaussianNatural {
    fn add_assign(&mut self, rhs: &GaussianNatural) {
        assert_eq!(self.form, rhs.form, "adding natural vectors of different forms");
        self.eta1 += &rhs.eta1;
        self.eta2 += &rhs.eta2;
    }
}

/// Mean, covariance and log-determinant of the covariance of a normal density.
#[derive(Debug, Clone)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub log_det_cov: f64,
}

impl GaussianMoments {
    /// Differential entropy `d/2 (1 + ln 2 pi) + ln|Sigma| / 2`.
    pub fn entropy(&self) -> f64 {
        let d = self.mean.len() as f64;
        0.5 * d * (1.0 + LN_2PI) + 0.5 * self.log_det_cov
    }
}

pub fn gauss_to_natural(mean: &DVector<f64>, cov: &DMatrix<f64>, form: GaussianForm) -> Result<GaussianNatural> {
    if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
        return Err(Error::Shape(format!(
            "mean of length {} with covariance {}x{}",
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let (precision, _) = spd_inverse(cov, "covariance")?;
    Ok(GaussianNatural::from_precision(&precision * mean, &precision, form))
}

pub fn gauss_from_natural(eta: &GaussianNatural) -> Result<GaussianMoments> {
    let precision = eta.precision()?;
    let (cov, log_det_precision) = spd_inverse(&precision, "Gaussian natural parameters")?;
    let mean = &cov * &eta.eta1;
    Ok(GaussianMoments {
        mean,
        cov,
        log_det_cov: -log_det_precision,
    })
}

/// Natural parameters `(-(xi + 2)/2, -lambda/2)` of an inverse-χ²(xi, lambda) density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvChiSqNatural {
    pub eta1: f64,
    pub eta2: f64,
}

impl InvChiSqNatural {
    pub const ZERO: Self = Self { eta1: 0.0, eta2: 0.0 };

    pub fn is_proper(&self) -> bool {
        self.eta1 < -1.0 && self.eta2 < 0.0 && self.eta1.is_finite() && self.eta2.is_finite()
    }

    fn check(&self) -> Result<()> {
        if self.is_proper() {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "inverse-chi-squared natural parameters ({}, {}) are improper",
                self.eta1, self.eta2
            )))
        }
    }

    /// `E(1/x) = (eta1 + 1) / eta2`, which equals `xi / lambda`.
    pub fn mean_reciprocal(&self) -> Result<f64> {
        self.check()?;
        Ok((self.eta1 + 1.0) / self.eta2)
    }

    /// `E(log x) = log(lambda / 2) - digamma(xi / 2)`.
    pub fn mean_log(&self) -> Result<f64> {
        let (xi, lambda) = invchisq_from_natural(self)?;
        Ok((0.5 * lambda).ln() - digamma(0.5 * xi))
    }

    pub fn entropy(&self) -> Result<f64> {
        let (xi, lambda) = invchisq_from_natural(self)?;
        let e_log = (0.5 * lambda).ln() - digamma(0.5 * xi);
        let log_norm = 0.5 * xi * (0.5 * lambda).ln() - ln_gamma(0.5 * xi);
        Ok(-(log_norm - 0.5 * (xi + 2.0) * e_log - 0.5 * xi))
    }
}

impl Add for InvChiSqNatural {
    type Output = InvChiSqNatural;

    fn add(self, rhs: InvChiSqNatural) -> InvChiSqNatural {
        InvChiSqNatural {
            eta1: self.eta1 + rhs.eta1,
            eta2: self.eta2 + rhs.eta2,
        }
    }
}

pub fn invchisq_to_natural(xi: f64, lambda: f64) -> Result<InvChiSqNatural> {
    if !(xi > 0.0 && lambda > 0.0) {
        return Err(Error::Domain(format!(
            "inverse-chi-squared needs positive shape and scale, got ({xi}, {lambda})"
        )));
    }
    Ok(InvChiSqNatural {
        eta1: -0.5 * (xi + 2.0),
        eta2: -0.5 * lambda,
    })
}

/// Shape and scale `(xi, lambda) = (-2 eta1 - 2, -2 eta2)`.
pub fn invchisq_from_natural(eta: &InvChiSqNatural) -> Result<(f64, f64)> {
    eta.check()?;
    Ok((-2.0 * eta.eta1 - 2.0, -2.0 * eta.eta2))
}

pub fn invchisq_mean_reciprocal(eta: &InvChiSqNatural) -> Result<f64> {
    eta.mean_reciprocal()
}

/// `E_q log p(x)` for `x ~ inverse-χ²(xi0, lambda0)` where the scale
/// `lambda0` may itself be random under `q`.
///
/// Arguments are the moments the expectation needs: `E(lambda0)`,
/// `E(log lambda0)`, `E(log x)` and `E(1/x)`.
pub fn invchisq_expected_log_density(xi0: f64, e_lambda0: f64, e_log_lambda0: f64, e_log_x: f64, e_inv_x: f64) -> f64 {
    0.5 * xi0 * (e_log_lambda0 - std::f64::consts::LN_2)
        - ln_gamma(0.5 * xi0)
        - 0.5 * (xi0 + 2.0) * e_log_x
        - 0.5 * e_lambda0 * e_inv_x
}
