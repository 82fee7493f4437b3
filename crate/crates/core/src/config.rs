//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accountant::Accountant;
use crate::error::{Error, Result};
use crate::fedsim::{Activation, Algorithm, Weighting};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub federation: FederationConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub sparsification: SparsificationConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub n_clients: usize,
    /// Budget of each group, nondecreasing. Group `m` receives a share of
    /// the clients proportional to `group_ratios[m]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilons: Option<Vec<f64>>,
    /// Per-client budgets; clients are then grouped by sorting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_epsilons: Option<Vec<f64>>,
    /// Relative group sizes; equal sizes when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_ratios: Option<Vec<f64>>,
    /// Global sampling ratio `q`; `qn` clients train per round.
    pub q: f64,
    /// Explicit `δ`; otherwise `δ = n^(−delta_exponent)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default = "default_delta_exponent")]
    pub delta_exponent: f64,
    #[serde(default)]
    pub accountant: Accountant,
}

fn default_delta_exponent() -> f64 {
    1.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub algorithms: Vec<Algorithm>,
    pub rounds: u32,
    pub tau: u32,
    pub eta: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    pub clip: f64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default)]
    pub model: ModelKind,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Accuracy used for the rounds-to-threshold summary column.
    #[serde(default = "default_threshold")]
    pub accuracy_threshold: f64,
}

fn default_lr_decay() -> f64 {
    0.99
}

fn default_hidden() -> usize {
    32
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn default_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityMode {
    /// `k*_m/d` from the optimal-level formula at the calibrated noise.
    #[default]
    Optimal,
    /// The listed retained fractions.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsificationConfig {
    #[serde(default)]
    pub mode: SparsityMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fractions: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub source: DataSource,
    /// Seed for dataset generation and partitioning, shared by all cells.
    #[serde(default)]
    pub seed: u64,
    /// Dirichlet concentration of the non-IID split; IID when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dirichlet_alpha: Option<f64>,
    #[serde(default = "default_examples_per_client")]
    pub examples_per_client: usize,
    #[serde(default = "default_n_features")]
    pub n_features: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_center_scale")]
    pub center_scale: f64,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    #[serde(default = "default_test_examples")]
    pub test_examples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_examples: Option<usize>,
    /// Held-out share of a file-backed dataset.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_examples_per_client() -> usize {
    60
}

fn default_n_features() -> usize {
    32
}

fn default_num_classes() -> usize {
    10
}

fn default_center_scale() -> f64 {
    1.0
}

fn default_noise_scale() -> f64 {
    1.0
}

fn default_test_examples() -> usize {
    2000
}

fn default_test_fraction() -> f64 {
    0.2
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            seed: 0,
            dirichlet_alpha: None,
            examples_per_client: default_examples_per_client(),
            n_features: default_n_features(),
            num_classes: default_num_classes(),
            center_scale: default_center_scale(),
            noise_scale: default_noise_scale(),
            test_examples: default_test_examples(),
            path: None,
            images: None,
            labels: None,
            max_examples: None,
            test_fraction: default_test_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
}

fn default_directory() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { directory: default_directory() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverObjective {
    #[default]
    OptimalPhi,
    FixedFractions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub objective: SolverObjective,
    /// Per-group `[lower, upper]` bounds on `q_m`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_bounds: Option<Vec<[f64; 2]>>,
}

fn default_restarts() -> usize {
    64
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { restarts: default_restarts(), seed: 0, objective: SolverObjective::default(), q_bounds: None }
    }
}

/// Constants of the convergence bound and the dimension used by reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "one")]
    pub l: f64,
    #[serde(default)]
    pub kappa_sq: f64,
    #[serde(default = "one")]
    pub beta_sq: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta_sq: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub f0_minus_fstar: f64,
    /// Model dimension for noise reports; the configured model's otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<usize>,
}

fn one() -> f64 {
    1.0
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { l: 1.0, kappa_sq: 0.0, beta_sq: 1.0, zeta_sq: None, f0_minus_fstar: 1.0, dimension: None }
    }
}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        invalid(format!("{name} must be positive, got {v}"))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn num_groups(&self) -> usize {
        let f = &self.federation;
        match (&f.epsilons, &f.group_ratios) {
            (Some(e), _) => e.len(),
            (None, Some(r)) => r.len(),
            (None, None) => 1,
        }
    }

    /// Relative group sizes, equal when unspecified.
    pub fn group_ratios(&self) -> Vec<f64> {
        self.federation.group_ratios.clone().unwrap_or_else(|| vec![1.0; self.num_groups()])
    }

    pub fn delta(&self) -> f64 {
        let f = &self.federation;
        f.delta.unwrap_or_else(|| (f.n_clients as f64).powf(-f.delta_exponent))
    }

    /// Every cross-field constraint that can be checked without running.
    pub fn validate(&self) -> Result<()> {
        let f = &self.federation;
        let n = f.n_clients;
        if n == 0 {
            return invalid("federation.n_clients must be positive");
        }
        match (&f.epsilons, &f.client_epsilons) {
            (Some(_), Some(_)) => return invalid("set either federation.epsilons or federation.client_epsilons"),
            (None, None) => return invalid("federation needs epsilons or client_epsilons"),
            (Some(e), None) => {
                if e.is_empty() {
                    return invalid("federation.epsilons lists no groups");
                }
                if e.windows(2).any(|w| w[1] < w[0]) {
                    return invalid("federation.epsilons must be nondecreasing");
                }
                if let Some(r) = &f.group_ratios {
                    if r.len() != e.len() {
                        return invalid(format!("{} group ratios for {} groups", r.len(), e.len()));
                    }
                }
                e.iter().try_for_each(|&v| positive("group epsilon", v))?;
            }
            (None, Some(c)) => {
                if c.len() != n {
                    return invalid(format!("{} client budgets for {n} clients", c.len()));
                }
                if f.group_ratios.as_ref().is_none_or(Vec::is_empty) {
                    return invalid("federation.client_epsilons needs group_ratios");
                }
                c.iter().try_for_each(|&v| positive("client epsilon", v))?;
            }
        }
        let m = self.num_groups();
        if m > n {
            return invalid(format!("{m} groups for {n} clients"));
        }
        self.group_ratios().iter().try_for_each(|&v| positive("group ratio", v))?;
        if !(f.q > 0.0 && f.q <= 1.0) {
            return invalid(format!("federation.q must lie in (0, 1], got {}", f.q));
        }
        if (f.q * n as f64).round() < 1.0 {
            return invalid("federation.q * n_clients rounds to zero participants");
        }
        if let Some(d) = f.delta {
            if !(d > 0.0 && d < 1.0) {
                return invalid(format!("federation.delta must lie in (0, 1), got {d}"));
            }
        } else {
            positive("federation.delta_exponent", f.delta_exponent)?;
        }

        let t = &self.training;
        if t.algorithms.is_empty() {
            return invalid("training.algorithms is empty");
        }
        if t.seeds.is_empty() {
            return invalid("training.seeds is empty");
        }
        // TOML integers are signed 64-bit.
        let max = i64::MAX as u64;
        if t.seeds.iter().chain([&self.data.seed, &self.solver.seed]).any(|&s| s > max) {
            return invalid(format!("seeds must not exceed {max}"));
        }
        if t.tau == 0 || t.batch_size == 0 {
            return invalid("training.tau and training.batch_size must be positive");
        }
        positive("training.eta", t.eta)?;
        positive("training.clip", t.clip)?;
        if !(t.lr_decay > 0.0 && t.lr_decay <= 1.0) {
            return invalid("training.lr_decay must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return invalid("training.momentum must lie in [0, 1)");
        }
        if t.model == ModelKind::Mlp && t.hidden == 0 {
            return invalid("training.hidden must be positive");
        }
        if t.algorithms.iter().any(|a| a.is_private()) && t.rounds == 0 {
            return invalid("training.rounds must be positive for private algorithms");
        }

        let s = &self.sparsification;
        match (&s.mode, &s.fractions) {
            (SparsityMode::Fixed, None) => return invalid("sparsification.mode = \"fixed\" needs fractions"),
            (_, Some(fr)) => {
                if fr.len() != m {
                    return invalid(format!("{} sparsification fractions for {m} groups", fr.len()));
                }
                if fr.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
                    return invalid("sparsification fractions must lie in (0, 1]");
                }
            }
            _ => {}
        }
        if self.solver.objective == SolverObjective::FixedFractions && s.fractions.is_none() {
            return invalid("solver.objective = \"fixed_fractions\" needs sparsification.fractions");
        }
        if let Some(b) = &self.solver.q_bounds {
            if b.len() != m {
                return invalid(format!("{} solver.q_bounds for {m} groups", b.len()));
            }
        }
        if self.solver.restarts == 0 {
            return invalid("solver.restarts must be positive");
        }

        let d = &self.data;
        match d.source {
            DataSource::Synthetic => {
                if d.path.is_some() || d.images.is_some() || d.labels.is_some() {
                    return invalid("synthetic data takes no file paths");
                }
                if d.examples_per_client == 0 || d.n_features == 0 || d.num_classes < 2 || d.test_examples == 0 {
                    return invalid("synthetic data needs examples, features, two classes and a test set");
                }
            }
            DataSource::Csv if d.path.is_none() => return invalid("data.source = \"csv\" needs data.path"),
            DataSource::Idx if d.images.is_none() || d.labels.is_none() => {
                return invalid("data.source = \"idx\" needs data.images and data.labels")
            }
            _ => {}
        }
        if let Some(a) = d.dirichlet_alpha {
            positive("data.dirichlet_alpha", a)?;
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return invalid("data.test_fraction must lie in (0, 1)");
        }

        let a = &self.analysis;
        positive("analysis.l", a.l)?;
        if !(a.beta_sq >= 1.0 && a.kappa_sq >= 0.0 && a.f0_minus_fstar >= 0.0) {
            return invalid("analysis needs beta_sq >= 1, kappa_sq >= 0, f0_minus_fstar >= 0");
        }
        if let Some(z) = &a.zeta_sq {
            if z.len() != m || z.iter().any(|v| !(*v >= 0.0)) {
                return invalid("analysis.zeta_sq needs one nonnegative value per group");
            }
        }
        if a.dimension == Some(0) {
            return invalid("analysis.dimension must be positive");
        }
        Ok(())
    }
}
