//! Fixtures shared by the benchmarks.

use mfpca::dataset::FunctionalDataset;
use mfpca::model::Hyperparameters;
use mfpca::select::rule_of_thumb_k;
use mfpca::simulate::{generate_dataset, SimulationScenario};
use mfpca::splines::{bases_for, SplineBasis};

/// Periodic two-component dataset with its rule-of-thumb bases.
pub fn fixture(n: usize, p: usize) -> (FunctionalDataset, Vec<SplineBasis>) {
    let scenario = SimulationScenario {
        n,
        p,
        l_true: 2,
        obs_range: (10, 30),
        seed: 2024,
        ..Default::default()
    };
    let (data, _) = generate_dataset(&scenario).expect("valid scenario");
    let bases = bases_for(&rule_of_thumb_k(&data)).expect("valid spline counts");
    (data, bases)
}

pub fn hyper(l: usize) -> Hyperparameters {
    Hyperparameters {
        l,
        ..Default::default()
    }
}
