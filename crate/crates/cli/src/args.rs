use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mfpca::dataset::ColumnConfig;
use mfpca::engines::Engine;
use mfpca::model::Hyperparameters;
use mfpca::select::{KStrategy, LStrategy};
use mfpca::simulate::Method;

use crate::Failure;

#[derive(Debug, Parser)]
#[command(
    name = "mfpca",
    version,
    about = "Bayesian multivariate functional PCA for sparse longitudinal data"
)]
pub struct Cli {
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model and write the decomposition.
    Fit(FitArgs),
    /// Choose K and L, reporting every candidate.
    Select(SelectArgs),
    /// Predict trajectories with 95% bands from a saved fit.
    Predict(PredictArgs),
    /// Generate a dataset and its ground truth.
    Simulate(SimulateArgs),
    /// Run seeded replicates of generate, fit and score.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineArg {
    Mfvb,
    Vmp,
}

impl From<EngineArg> for Engine {
    fn from(e: EngineArg) -> Self {
        match e {
            EngineArg::Mfvb => Engine::Mfvb,
            EngineArg::Vmp => Engine::Vmp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KArg {
    Rule,
    Model,
}

impl From<KArg> for KStrategy {
    fn from(k: KArg) -> Self {
        match k {
            KArg::Rule => KStrategy::RuleOfThumb,
            KArg::Model => KStrategy::ModelChoice,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LArg {
    Pve,
    Model,
}

impl From<LArg> for LStrategy {
    fn from(l: LArg) -> Self {
        match l {
            LArg::Pve => LStrategy::Pve,
            LArg::Model => LStrategy::ModelChoice,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Multivariate,
    Univariate,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Multivariate => Method::Multivariate,
            MethodArg::Univariate => Method::Univariate,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ColumnArgs {
    #[arg(long, default_value = "subject")]
    pub col_subject: String,
    #[arg(long, default_value = "variable")]
    pub col_variable: String,
    #[arg(long, default_value = "time")]
    pub col_time: String,
    #[arg(long, default_value = "value")]
    pub col_value: String,
}

impl ColumnArgs {
    pub fn config(&self) -> ColumnConfig {
        ColumnConfig {
            subject: self.col_subject.clone(),
            variable: self.col_variable.clone(),
            time: self.col_time.clone(),
            value: self.col_value.clone(),
        }
    }
}

/// Hyperparameters: a JSON config file, then individual overrides.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// JSON file with any of sigma_beta, a, l, tau, max_iter, seed.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mfvb")]
    pub engine: EngineArg,
    /// L_max: components fitted before the PVE rule truncates.
    #[arg(long)]
    pub num_components: Option<usize>,
    /// Relative ELBO change that stops iteration.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Prior s.d. of the intercept and slope coefficients.
    #[arg(long)]
    pub sigma_beta: Option<f64>,
    /// Half-Cauchy scale of the standard deviations.
    #[arg(long)]
    pub prior_scale: Option<f64>,
}

/// `L_max` used when neither the config nor the flags set one.
pub const DEFAULT_L_MAX: usize = 10;

impl ModelArgs {
    pub fn hyperparameters(&self) -> Result<Hyperparameters, Failure> {
        let mut h = match &self.config {
            Some(path) => Hyperparameters::from_json_file(path)?,
            None => Hyperparameters {
                l: DEFAULT_L_MAX,
                ..Default::default()
            },
        };
        if let Some(v) = self.num_components {
            h.l = v;
        }
        if let Some(v) = self.tol {
            h.tau = v;
        }
        if let Some(v) = self.max_iter {
            h.max_iter = v;
        }
        if let Some(v) = self.seed {
            h.seed = v;
        }
        if let Some(v) = self.sigma_beta {
            h.sigma_beta = v;
        }
        if let Some(v) = self.prior_scale {
            h.a = v;
        }
        h.validate()?;
        Ok(h)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    /// Long-format CSV: one observation per row.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub columns: ColumnArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Spline count, one value for all variables or one per variable.
    #[arg(long, value_delimiter = ',', conflicts_with = "select_k")]
    pub num_splines: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "rule")]
    pub select_k: KArg,
    #[arg(long, default_value_t = 5)]
    pub k_min: usize,
    #[arg(long, default_value_t = 20)]
    pub k_max: usize,
    #[arg(long, default_value_t = 0.95)]
    pub pve_threshold: f64,
    #[arg(long, default_value_t = 1000)]
    pub grid_size: usize,
    /// Write outputs even when the iteration limit is hit (exit status stays 3).
    #[arg(long)]
    pub allow_nonconverged: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelectArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub columns: ColumnArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value = "rule")]
    pub select_k: KArg,
    #[arg(long, value_enum, default_value = "pve")]
    pub select_l: LArg,
    #[arg(long, default_value_t = 5)]
    pub k_min: usize,
    #[arg(long, default_value_t = 20)]
    pub k_max: usize,
    #[arg(long, default_value_t = 1)]
    pub l_min: usize,
    #[arg(long, default_value_t = 0.95)]
    pub pve_threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictArgs {
    /// Output directory of an earlier `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// `all` or a comma-separated list of subject ids.
    #[arg(long, default_value = "all")]
    pub subjects: String,
    /// Points of the equidistant prediction grid.
    #[arg(long, default_value_t = 1000)]
    pub grid_size: usize,
    /// Posterior draws behind each band.
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Scenario JSON; omitted fields take their defaults.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Points of the grid the ground-truth functions are written on.
    #[arg(long, default_value_t = 1000)]
    pub grid_size: usize,
    #[command(flatten)]
    pub columns: ColumnArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub replicates: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "multivariate")]
    pub methods: Vec<MethodArg>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Fixed spline count for every variable; the rule of thumb otherwise.
    #[arg(long)]
    pub num_splines: Option<usize>,
    #[arg(long, default_value_t = 0.95)]
    pub pve_threshold: f64,
    #[arg(long, default_value_t = 1000)]
    pub grid_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}
