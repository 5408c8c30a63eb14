//! Experiment configuration, read from TOML. See `configs/example.toml` for an
//! annotated instance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::{Algorithm, CorrectionSite, ScaffoldVariant};
use crate::diagnostics::ErrorMode;
use crate::error::{Error, Result};
use crate::local::LocalConfig;
use crate::objectives::MlpLoss;
use crate::schedules::{LrSchedule, DEFAULT_NU};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub num_clients: usize,
    pub rounds: usize,
    pub algorithms: Vec<Algorithm>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub threads: usize,
    /// Standard deviation of the Gaussian initial model; 0 starts at the origin.
    #[serde(default)]
    pub init_scale: f64,
    pub task: TaskConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    pub local: LocalSection,
    pub availability: AvailabilityConfig,
    pub lr: LrSchedule,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub scaffold: ScaffoldConfig,
    #[serde(default)]
    pub mimic: MimicConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    /// `f_i(w) = mean_j ½‖w − x_j‖²` on per-client point clouds.
    Quadratic {
        dim: usize,
        #[serde(default = "default_points")]
        points_per_client: usize,
        #[serde(default = "one")]
        spread: f64,
        /// Client means are drawn as `heterogeneity · z`, `z` standard normal.
        #[serde(default = "one")]
        heterogeneity: f64,
        /// Explicit client means; overrides `heterogeneity`.
        #[serde(default)]
        means: Option<Vec<Vec<f64>>>,
    },
    Logistic {
        classes: usize,
        per_class: usize,
        features: usize,
        separation: f64,
        #[serde(default)]
        reg: f64,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
    },
    Mlp {
        classes: usize,
        per_class: usize,
        features: usize,
        separation: f64,
        hidden: usize,
        #[serde(default = "default_mlp_loss")]
        loss: MlpLoss,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
    },
}

fn default_points() -> usize {
    20
}

fn one() -> f64 {
    1.0
}

fn default_test_per_class() -> usize {
    50
}

fn default_mlp_loss() -> MlpLoss {
    MlpLoss::CrossEntropy
}

impl TaskConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            TaskConfig::Quadratic { .. } => "quadratic",
            TaskConfig::Logistic { .. } => "logistic",
            TaskConfig::Mlp { .. } => "mlp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default = "two")]
    pub shards_per_client: usize,
}

fn two() -> usize {
    2
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { shards_per_client: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalSection {
    /// Local SGD steps `K`. Exactly one of `steps` and `epochs` is required.
    #[serde(default)]
    pub steps: Option<usize>,
    /// Local epochs, expanded to `⌈|D_i|/batch⌉ · epochs` steps.
    #[serde(default)]
    pub epochs: Option<usize>,
    pub lr: f64,
    pub batch_size: usize,
    /// Proximal weight; only used by FedProx.
    #[serde(default)]
    pub prox_mu: f64,
    /// Scale `η_L` by `η_t / η_0` every round instead of keeping it fixed.
    #[serde(default)]
    pub decay_local_lr: bool,
}

impl LocalSection {
    /// Resolve to a trainer config for clients holding `samples` points each.
    pub fn resolve(&self, samples: usize, algorithm: Algorithm) -> Result<LocalConfig> {
        let steps = match (self.steps, self.epochs) {
            (Some(k), None) => k,
            (None, Some(e)) => LocalConfig::epochs_to_steps(e, samples, self.batch_size),
            _ => return Err(Error::config("[local] needs exactly one of `steps` and `epochs`")),
        };
        let mu = if algorithm == Algorithm::FedProx { self.prox_mu } else { 0.0 };
        let cfg = LocalConfig::new(steps, self.lr, self.batch_size).with_prox(mu);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "snake_case", deny_unknown_fields)]
pub enum AvailabilityConfig {
    Full,
    RoundRobin {
        tau_max: usize,
    },
    StaticProb {
        p: f64,
        #[serde(default = "yes")]
        force_full_first: bool,
    },
    Weighted {
        ratio: f64,
        #[serde(default = "yes")]
        force_full_first: bool,
    },
}

fn yes() -> bool {
    true
}

impl AvailabilityConfig {
    pub fn name(&self) -> &'static str {
        match self {
            AvailabilityConfig::Full => "full",
            AvailabilityConfig::RoundRobin { .. } => "round_robin",
            AvailabilityConfig::StaticProb { .. } => "static_prob",
            AvailabilityConfig::Weighted { .. } => "weighted",
        }
    }

    pub fn forces_full_first(&self) -> bool {
        match *self {
            AvailabilityConfig::StaticProb { force_full_first, .. }
            | AvailabilityConfig::Weighted { force_full_first, .. } => force_full_first,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    #[serde(default)]
    pub error_mode: ErrorMode,
    /// Measure `Φ̂_t` every round (expensive).
    #[serde(default)]
    pub phi: bool,
    #[serde(default = "default_replays")]
    pub phi_replays: usize,
    /// Replays used by the Monte Carlo `E_t` mode when `phi` is off.
    #[serde(default = "default_error_replays")]
    pub error_replays: usize,
    /// Test accuracy every this many rounds (and always at the end).
    #[serde(default = "one_usize")]
    pub eval_every: usize,
    #[serde(default = "default_nu")]
    pub nu: f64,
}

fn default_replays() -> usize {
    1000
}

fn default_error_replays() -> usize {
    100
}

fn one_usize() -> usize {
    1
}

fn default_nu() -> f64 {
    DEFAULT_NU
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            error_mode: ErrorMode::default(),
            phi: false,
            phi_replays: default_replays(),
            error_replays: default_error_replays(),
            eval_every: 1,
            nu: DEFAULT_NU,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaffoldConfig {
    #[serde(default)]
    pub variant: ScaffoldVariant,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MimicConfig {
    #[serde(default)]
    pub correction_site: CorrectionSite,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("num_clients must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("no seeds given"));
        }
        if self.algorithms.is_empty() {
            return Err(Error::config("no algorithms given"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("init_scale must be a finite non-negative number"));
        }
        if self.local.steps.is_some() == self.local.epochs.is_some() {
            return Err(Error::config("[local] needs exactly one of `steps` and `epochs`"));
        }
        if !(self.local.prox_mu >= 0.0) {
            return Err(Error::config("prox_mu must be non-negative"));
        }
        self.lr.validate()?;
        match self.availability {
            AvailabilityConfig::RoundRobin { tau_max } if tau_max < 1 => {
                return Err(Error::config("tau_max must be at least 1"))
            }
            AvailabilityConfig::StaticProb { p, .. } if !(p > 0.0 && p <= 1.0) => {
                return Err(Error::config(format!("activation probability {p} not in (0, 1]")))
            }
            AvailabilityConfig::Weighted { ratio, .. } => {
                crate::availability::weighted_sample_size(self.num_clients, ratio)?;
            }
            _ => {}
        }
        if self.algorithms.contains(&Algorithm::Mifa) && !self.availability.forces_full_first() {
            return Err(Error::config("MIFA needs every client active at t = 0; keep force_full_first on"));
        }
        let d = &self.diagnostics;
        if d.phi && d.phi_replays < 2 {
            return Err(Error::config("phi_replays must be at least 2"));
        }
        if d.error_mode == ErrorMode::MonteCarlo && !d.phi && d.error_replays < 1 {
            return Err(Error::config("error_replays must be at least 1"));
        }
        if d.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        if !(d.nu > 0.0 && d.nu < 1.0) {
            return Err(Error::config("nu must lie in (0, 1)"));
        }
        match &self.task {
            TaskConfig::Quadratic { dim, points_per_client, spread, means, .. } => {
                if *dim == 0 {
                    return Err(Error::config("quadratic dim must be at least 1"));
                }
                if *points_per_client == 0 || points_per_client % 2 != 0 {
                    return Err(Error::config("points_per_client must be a positive even number"));
                }
                if !(*spread >= 0.0) {
                    return Err(Error::config("spread must be non-negative"));
                }
                if let Some(m) = means {
                    if m.len() != self.num_clients || m.iter().any(|v| v.len() != *dim) {
                        return Err(Error::config("means must list num_clients vectors of length dim"));
                    }
                }
            }
            TaskConfig::Logistic { classes, per_class, test_per_class, .. }
            | TaskConfig::Mlp { classes, per_class, test_per_class, .. } => {
                let total = classes * per_class;
                let shards = self.num_clients * self.partition.shards_per_client;
                if shards == 0 || total % shards != 0 {
                    return Err(Error::config(format!("{total} samples cannot be split into {shards} equal shards")));
                }
                if *test_per_class == 0 {
                    return Err(Error::config("test_per_class must be at least 1"));
                }
            }
        }
        Ok(())
    }
}
