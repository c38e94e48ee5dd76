//! Declarative experiment configuration (TOML, unknown keys rejected).

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its substreams from it.
    pub seed: u64,
    pub domain: DomainConfig,
    pub grid: GridConfig,
    pub kernel: KernelConfig,
    #[serde(default)]
    pub reference: ReferenceConfig,
    pub observations: ObservationsConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub propagation: PropagationConfig,
    #[serde(default)]
    pub active_learning: ActiveLearningConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub lx: f64,
    pub ly: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub sigma: f64,
    pub l1: f64,
    pub l2: f64,
    #[serde(default)]
    pub sigma_eps: f64,
    /// How `l1`, `l2` parameterize the squared-exponential kernel:
    /// "direct" uses `exp(-d^2/l^2)`, "gaussian" the standard
    /// `exp(-d^2/(2 l^2))`.
    #[serde(default = "default_lengthscale")]
    pub lengthscale: String,
    /// Number of multistarts the `fit` command adds to the configured
    /// kernel as initial guesses.
    #[serde(default = "default_fit_starts")]
    pub fit_starts: usize,
}

fn default_lengthscale() -> String {
    "direct".to_string()
}

fn default_fit_starts() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    /// Modes used to synthesize the reference field; when absent, the
    /// retained-variance rule decides.
    pub d_max: Option<usize>,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self { d_max: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationsConfig {
    pub count: usize,
    /// Standard deviation of synthetic readout noise added to the sampled
    /// observation values.
    #[serde(default)]
    pub noise_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// "approach-1", "approach-2" or "both".
    #[serde(default = "default_approach")]
    pub approach: String,
    /// Retained-variance fraction for truncations.
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    /// Explicit unconditional dimension for approach 2 (default: the
    /// retained-variance count).
    pub d: Option<usize>,
    /// Explicit model dimension for approach 1 (default: approach 2's rank
    /// when comparing, otherwise the retained-variance count).
    pub r: Option<usize>,
}

fn default_approach() -> String {
    "approach-1".to_string()
}

fn default_fraction() -> f64 {
    0.99
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { approach: default_approach(), fraction: default_fraction(), d: None, r: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationConfig {
    /// "mc" or "collocation".
    #[serde(default = "default_propagation_method")]
    pub method: String,
    /// Monte Carlo sample count.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Sparse-grid level for collocation.
    #[serde(default = "default_level")]
    pub level: usize,
    /// Sample counts at which the MC norm table is recorded (defaults to
    /// a doubling schedule up to `samples`).
    pub convergence_checkpoints: Option<Vec<usize>>,
}

fn default_propagation_method() -> String {
    "mc".to_string()
}

fn default_samples() -> usize {
    2000
}

fn default_level() -> usize {
    3
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            method: default_propagation_method(),
            samples: default_samples(),
            level: default_level(),
            convergence_checkpoints: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActiveLearningConfig {
    /// 1, 2, or 0 for both.
    #[serde(default = "default_al_method")]
    pub method: u8,
    #[serde(default = "default_n_additional")]
    pub n_additional: usize,
    /// Ensemble size for method-2 acquisitions.
    #[serde(default = "default_ensemble")]
    pub ensemble: usize,
    /// Monte Carlo samples for the per-step solution norms.
    #[serde(default = "default_al_mc")]
    pub mc_samples: usize,
    #[serde(default)]
    pub noise_std: f64,
    /// Dump the acquisition objective field of every step as CSV.
    #[serde(default)]
    pub dump_criteria: bool,
}

fn default_al_method() -> u8 {
    1
}

fn default_n_additional() -> usize {
    10
}

fn default_ensemble() -> usize {
    200
}

fn default_al_mc() -> usize {
    1000
}

impl Default for ActiveLearningConfig {
    fn default() -> Self {
        Self {
            method: default_al_method(),
            n_additional: default_n_additional(),
            ensemble: default_ensemble(),
            mc_samples: default_al_mc(),
            noise_std: 0.0,
            dump_criteria: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: Option<String>,
}

/// Shipped experiment presets encoding the reference setup.
pub const PRESETS: &[(&str, &str)] = &[
    ("paper-sigma065", include_str!("../presets/paper-sigma065.toml")),
    ("paper-sigma13", include_str!("../presets/paper-sigma13.toml")),
];

impl ExperimentConfig {
    pub fn from_str_named(text: &str, name: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text)
            .map_err(|e| anyhow::anyhow!("{name}: {e}"))?;
        config.validate().with_context(|| format!("invalid configuration in {name}"))?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_str_named(&text, &path.display().to_string())
    }

    pub fn preset(name: &str) -> Result<Self> {
        for (preset, text) in PRESETS {
            if *preset == name {
                return Self::from_str_named(text, &format!("preset {name}"));
            }
        }
        bail!(
            "unknown preset {name}; available: {}",
            PRESETS.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.domain.lx > 0.0 && self.domain.ly > 0.0) {
            bail!("domain extents must be positive");
        }
        if self.grid.nx < 2 || self.grid.ny < 2 {
            bail!("grid must have at least 2 cells per direction");
        }
        if !(self.kernel.sigma > 0.0 && self.kernel.l1 > 0.0 && self.kernel.l2 > 0.0) {
            bail!("kernel sigma, l1, l2 must be positive");
        }
        if self.kernel.sigma_eps < 0.0 {
            bail!("kernel sigma_eps must be nonnegative");
        }
        match self.kernel.lengthscale.as_str() {
            "direct" | "gaussian" => {}
            other => bail!("kernel.lengthscale must be direct or gaussian (got {other})"),
        }
        if self.observations.count == 0 {
            bail!("observations.count must be at least 1");
        }
        if !(self.model.fraction > 0.0 && self.model.fraction <= 1.0) {
            bail!("model.fraction must lie in (0, 1]");
        }
        match self.model.approach.as_str() {
            "approach-1" | "approach-2" | "both" => {}
            other => bail!("model.approach must be approach-1, approach-2 or both (got {other})"),
        }
        match self.propagation.method.as_str() {
            "mc" | "collocation" => {}
            other => bail!("propagation.method must be mc or collocation (got {other})"),
        }
        if self.propagation.samples < 2 {
            bail!("propagation.samples must be at least 2");
        }
        if self.propagation.level == 0 {
            bail!("propagation.level must be at least 1");
        }
        if self.active_learning.method > 2 {
            bail!("active_learning.method must be 0 (both), 1 or 2");
        }
        if self.active_learning.n_additional == 0 {
            bail!("active_learning.n_additional must be at least 1");
        }
        if self.active_learning.ensemble < 2 {
            bail!("active_learning.ensemble must be at least 2");
        }
        if self.active_learning.mc_samples < 2 {
            bail!("active_learning.mc_samples must be at least 2");
        }
        Ok(())
    }

    /// Hash of the canonical serialized form, recorded next to every
    /// output file.
    pub fn sha256(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
