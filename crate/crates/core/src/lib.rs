//! Bayesian multivariate functional principal component analysis for sparse,
//! irregularly sampled curves.
//!
//! Each subject contributes a handful of noisy observations per variable. The
//! model represents the mean and latent functions of every variable with a
//! penalized spline basis, shares one score vector per subject across all
//! variables, and is fitted with either mean-field coordinate ascent
//! ([`engines::fit_mfvb`]) or variational message passing
//! ([`engines::fit_vmp`]). [`postprocess::orthonormalize`] turns the
//! rotation-unidentified fit into orthonormal eigenfunctions with
//! uncorrelated, variance-ordered scores.
//!
//! ```no_run
//! use mfpca::prelude::*;
//!
//! let scenario = SimulationScenario::default();
//! let (data, _truth) = generate_dataset(&scenario).unwrap();
//! let hyper = Hyperparameters::default();
//! let bases = bases_for(&rule_of_thumb_k(&data)).unwrap();
//! let raw = fit_mfvb(&data, &bases, &hyper).unwrap();
//! let fit = orthonormalize(&raw, 1000).unwrap();
//! println!("{:?}", fit.pve);
//! ```

pub mod dataset;
pub mod engines;
pub mod error;
pub mod expfam;
pub mod export;
pub mod fragment;
pub mod model;
pub mod postprocess;
pub mod select;
pub mod simulate;
pub mod splines;

pub use error::{Error, Result};

pub mod prelude {
    pub use crate::dataset::{ColumnConfig, FunctionalDataset, Series, ValidationReport};
    pub use crate::engines::{elbo, fit, fit_mfvb, fit_vmp, Engine, RawFit};
    pub use crate::error::{Error, Result};
    pub use crate::model::{Hyperparameters, MomentCache, VariationalState};
    pub use crate::postprocess::{align_signs, h_inner, orthonormalize, OrthonormalizedFit};
    pub use crate::select::{rule_of_thumb_k, select_l_pve, SelectionConfig};
    pub use crate::simulate::{generate_dataset, FunctionFamily, GroundTruth, SimulationScenario};
    pub use crate::splines::{bases_for, EvaluationGrid, SplineBasis};
}
