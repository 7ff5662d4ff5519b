//! Declarative experiment description, read from TOML.

use std::path::{Path, PathBuf};

use rfalcf_core::data::{self, DataMatrix};
use rfalcf_core::{BaselineParams, Hyperparams, Preprocess};
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    RfaLcf,
    Cf,
    Lccf,
    Lcf,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::RfaLcf, Algorithm::Cf, Algorithm::Lccf, Algorithm::Lcf];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::RfaLcf => "rfa_lcf",
            Algorithm::Cf => "cf",
            Algorithm::Lccf => "lccf",
            Algorithm::Lcf => "lcf",
        }
    }

    pub fn parse(s: &str) -> CliResult<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| CliError::Usage(format!("unknown algorithm '{s}' (expected rfa_lcf, cf, lccf or lcf)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    SingleFit,
    CategorySweep,
    NoiseSweep,
    GridSearch,
    WeightCompare,
}

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// One sample per row, label in the last column when `has_labels`.
    Csv {
        path: PathBuf,
        #[serde(default = "default_true")]
        has_labels: bool,
    },
    Blobs {
        n_per_class: usize,
        classes: usize,
        dim: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    SyntheticControl {
        #[serde(default = "default_scc_per_class")]
        n_per_class: usize,
        #[serde(default = "default_scc_length")]
        length: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub source: DatasetSource,
    /// Applied to every drawn subset, after corruption.
    #[serde(default)]
    pub preprocess: Preprocess,
    /// Replace the features by this many random projections.
    #[serde(default)]
    pub random_features: Option<usize>,
    #[serde(default)]
    pub projection_seed: u64,
}

impl DatasetConfig {
    pub fn load(&self, base_dir: &Path) -> CliResult<DataMatrix> {
        let mut dm = match &self.source {
            DatasetSource::Csv { path, has_labels } => {
                let p = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                data::load_dense_csv(&p, *has_labels)?
            }
            DatasetSource::Blobs { n_per_class, classes, dim, separation, seed } => {
                data::make_blobs(*n_per_class, *classes, *dim, *separation, *seed)?
            }
            DatasetSource::SyntheticControl { n_per_class, length, seed } => {
                data::synthetic_control(*n_per_class, *length, *seed)?
            }
        };
        if let Some(d) = self.random_features {
            dm = data::random_projection_features(&dm, d, self.projection_seed)?;
        }
        Ok(dm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default = "default_variances")]
    pub variances: Vec<f64>,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    /// Variance of the corrupted copy used by the weight comparison.
    #[serde(default = "default_weight_variance")]
    pub weight_variance: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            variances: default_variances(),
            fraction: default_fraction(),
            weight_variance: default_weight_variance(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridPreset {
    /// Uses the `alpha`, `beta` and `gamma` lists as given.
    Custom,
    /// `gamma = fixed`, `alpha x beta` swept.
    FixGamma,
    FixAlpha,
    FixBeta,
    /// Defaults, then each of `alpha`, `beta`, `gamma` set to 0.
    Ablation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_preset")]
    pub preset: GridPreset,
    #[serde(default = "default_grid")]
    pub alpha: Vec<f64>,
    #[serde(default = "default_grid")]
    pub beta: Vec<f64>,
    #[serde(default = "default_grid")]
    pub gamma: Vec<f64>,
    /// Value of the held parameter for the `fix_*` presets.
    #[serde(default = "default_fixed")]
    pub fixed: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            preset: default_preset(),
            alpha: default_grid(),
            beta: default_grid(),
            gamma: default_grid(),
            fixed: default_fixed(),
        }
    }
}

/// One grid cell: a named `(alpha, beta, gamma)` setting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub label: String,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl GridConfig {
    /// Expands the preset into cells, in row-major order of the swept lists.
    pub fn cells(&self, defaults: &Hyperparams) -> CliResult<Vec<GridCell>> {
        let cell = |label: String, alpha, beta, gamma| GridCell { label, alpha, beta, gamma };
        let mut out = Vec::new();
        match self.preset {
            GridPreset::Ablation => {
                let (a, b, g) = (defaults.alpha, defaults.beta, defaults.gamma);
                out.push(cell("alpha=0".into(), 0.0, b, g));
                out.push(cell("beta=0".into(), a, 0.0, g));
                out.push(cell("gamma=0".into(), a, b, 0.0));
                out.push(cell("default".into(), a, b, g));
            }
            GridPreset::Custom => {
                for &a in &self.alpha {
                    for &b in &self.beta {
                        for &g in &self.gamma {
                            out.push(cell(format!("alpha={a:e},beta={b:e},gamma={g:e}"), a, b, g));
                        }
                    }
                }
            }
            GridPreset::FixGamma => {
                for &a in &self.alpha {
                    for &b in &self.beta {
                        out.push(cell(format!("alpha={a:e},beta={b:e}"), a, b, self.fixed));
                    }
                }
            }
            GridPreset::FixAlpha => {
                for &b in &self.beta {
                    for &g in &self.gamma {
                        out.push(cell(format!("beta={b:e},gamma={g:e}"), self.fixed, b, g));
                    }
                }
            }
            GridPreset::FixBeta => {
                for &a in &self.alpha {
                    for &g in &self.gamma {
                        out.push(cell(format!("alpha={a:e},gamma={g:e}"), a, self.fixed, g));
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(CliError::Usage("grid is empty".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    pub dataset: DatasetConfig,
    /// Cluster counts; empty means "all classes of the dataset".
    #[serde(default)]
    pub k_values: Vec<usize>,
    /// Draws per K; unset means 30 for the synthetic control set, else 10.
    #[serde(default)]
    pub n_category_draws: Option<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Overrides the `K + 1` rank rule.
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default = "default_restarts")]
    pub kmeans_restarts: usize,
    /// Neighbourhood size for LCCF and the k-NN weight baselines.
    #[serde(default = "default_knn")]
    pub knn: usize,
    #[serde(default = "default_true")]
    pub write_traces: bool,
    /// Save an RFA-LCF checkpoint every this many iterations (0 = never).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Continue RFA-LCF fits from existing checkpoints.
    #[serde(default)]
    pub resume: bool,
    #[serde(default)]
    pub rfa: Hyperparams,
    #[serde(default)]
    pub baseline: BaselineParams,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub grid: GridConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn draws(&self) -> usize {
        self.n_category_draws.unwrap_or(match self.dataset.source {
            DatasetSource::SyntheticControl { .. } => 30,
            _ => 10,
        })
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |m: &str| Err(CliError::Usage(m.into()));
        if self.algorithms.is_empty() {
            return usage("at least one algorithm is required");
        }
        if self.seeds.is_empty() {
            return usage("at least one seed is required");
        }
        if self.n_category_draws == Some(0) {
            return usage("n_category_draws must be >= 1");
        }
        if self.kmeans_restarts == 0 {
            return usage("kmeans_restarts must be >= 1");
        }
        if self.k_values.contains(&0) {
            return usage("k_values must be >= 1");
        }
        if self.protocol == Protocol::NoiseSweep && self.noise.variances.is_empty() {
            return usage("noise sweep needs at least one variance");
        }
        if self.rank == Some(0) {
            return usage("rank must be >= 1");
        }
        self.rfa.validate()?;
        self.baseline.validate()?;
        Ok(())
    }
}

fn default_true() -> bool {
    true
}
fn default_separation() -> f64 {
    3.0
}
fn default_scc_per_class() -> usize {
    100
}
fn default_scc_length() -> usize {
    60
}
fn default_variances() -> Vec<f64> {
    (0..=10).map(|i| 10.0 * i as f64).collect()
}
fn default_fraction() -> f64 {
    0.2
}
fn default_weight_variance() -> f64 {
    20.0
}
fn default_preset() -> GridPreset {
    GridPreset::FixGamma
}
fn default_grid() -> Vec<f64> {
    (-4..=4).map(|e| 10f64.powi(2 * e)).collect()
}
fn default_fixed() -> f64 {
    1.0
}
fn default_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::RfaLcf]
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_restarts() -> usize {
    30
}
fn default_knn() -> usize {
    5
}
