//! Experiment configuration: one JSON file per experiment, with scalar
//! overrides from the command line.

use std::path::{Path, PathBuf};

use decil_core::analysis::FieldGrid;
use decil_core::env::EnvId;
use decil_core::models::ModelKind;
use decil_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

/// Policy names accepted by `evaluate`.
pub const POLICY_NAMES: [&str; 5] = ["decil", "bc", "noisy_bc", "joint", "expert"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env_id: EnvId,
    pub n_traj: usize,
    #[serde(default)]
    pub train: TrainConfig,
    /// Observation-noise levels for rollouts, raw state units.
    pub noise_levels: Vec<f64>,
    pub n_episodes: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Training noise levels swept by `fig2`, normalized units.
    #[serde(default = "default_sigma_sweep")]
    pub sigma_sweep: Vec<f64>,
    /// Monte Carlo draws per state for sensitivity ratios.
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    /// Policies compared by `evaluate`.
    #[serde(default = "default_policies")]
    pub policies: Vec<String>,
    /// Dataset read by `train`; defaults to `<output_dir>/dataset.json`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Model files; each defaults to `<output_dir>/models/<kind>.json`.
    #[serde(default)]
    pub models: ModelPaths,
    #[serde(default)]
    pub audit: AuditConfig,
    /// `KEY=VALUE` overrides applied on top of the file, in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPaths {
    pub dynamics: Option<PathBuf>,
    pub denoiser: Option<PathBuf>,
    pub bc: Option<PathBuf>,
    pub noisy_bc: Option<PathBuf>,
    pub joint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// Training states at which the composite Jacobians are checked.
    pub chain_probes: usize,
    /// Dataset transitions used by the Jacobian-norm comparison.
    pub norm_probes: usize,
    pub fd_eps: f64,
    pub quadratic_sigmas: Vec<f64>,
    pub quadratic_n_mc: usize,
    /// Perturbation norms for the linearization check, normalized units.
    pub linearization_radii: Vec<f64>,
    pub field_grid: FieldGrid,
    /// Start of the integrated field trajectories; defaults to a point 0.5
    /// above the curve at `p = 1`.
    pub field_initial_state: Option<Vec<f64>>,
    pub field_steps: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            chain_probes: 50,
            norm_probes: 100,
            fd_eps: 1e-4,
            quadratic_sigmas: vec![0.005, 0.01, 0.02],
            quadratic_n_mc: 100_000,
            linearization_radii: vec![0.05, 0.025, 0.0125],
            field_grid: FieldGrid {
                p_min: 0.0,
                p_max: std::f64::consts::TAU,
                q_min: -1.5,
                q_max: 1.5,
                resolution: 21,
            },
            field_initial_state: None,
            field_steps: 30,
        }
    }
}

fn default_sigma_sweep() -> Vec<f64> {
    vec![0.02, 0.05, 0.1, 0.2, 0.4]
}

fn default_n_mc() -> usize {
    500
}

fn default_policies() -> Vec<String> {
    ["decil", "bc", "noisy_bc", "joint"].map(String::from).to_vec()
}

impl ExperimentConfig {
    /// Reads a config file and applies `overrides`, then the dedicated
    /// `--seed` and `--out` flags.
    pub fn load(path: &Path, overrides: &[String], seed: Option<u64>, out: Option<&Path>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        let mut applied = Vec::new();
        for ov in overrides {
            apply_override(&mut value, ov)?;
            applied.push(ov.clone());
        }
        if let Some(seed) = seed {
            set_path(&mut value, "seeds", Value::from(vec![seed]))?;
            set_path(&mut value, "train.seed", Value::from(seed))?;
            applied.push(format!("--seed {seed}"));
        }
        if let Some(out) = out {
            set_path(
                &mut value,
                "output_dir",
                Value::from(out.to_string_lossy().into_owned()),
            )?;
            applied.push(format!("--out {}", out.display()));
        }
        if let Value::Object(map) = &mut value {
            let mut all: Vec<Value> = map
                .get("overrides")
                .and_then(Value::as_array)
                .cloned()
                .unwrap_or_default();
            all.extend(applied.into_iter().map(Value::from));
            map.insert("overrides".into(), Value::from(all));
        }
        let config: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |msg: String| Err(CliError::Usage(msg));
        if self.n_traj == 0 {
            return usage("n_traj must be at least 1".into());
        }
        if self.n_episodes == 0 {
            return usage("n_episodes must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return usage("seeds must not be empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return usage(format!("seeds must be distinct, got {:?}", self.seeds));
        }
        if self.noise_levels.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return usage(format!(
                "noise_levels must be non-negative, got {:?}",
                self.noise_levels
            ));
        }
        if self.noise_levels.windows(2).any(|w| w[0] > w[1]) {
            return usage(format!(
                "noise_levels must be sorted ascending, got {:?}",
                self.noise_levels
            ));
        }
        if self.sigma_sweep.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return usage(format!("sigma_sweep must be non-negative, got {:?}", self.sigma_sweep));
        }
        for name in &self.policies {
            if !POLICY_NAMES.contains(&name.as_str()) {
                return usage(format!(
                    "unknown policy '{name}', expected one of: {}",
                    POLICY_NAMES.join(", ")
                ));
            }
        }
        self.train
            .validate()
            .map_err(|e| CliError::Usage(format!("invalid train config: {e}")))
    }

    /// First configured seed, used by the single-run commands.
    pub fn primary_seed(&self) -> u64 {
        self.seeds[0]
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset
            .clone()
            .unwrap_or_else(|| self.output_dir.join("dataset.json"))
    }

    pub fn model_path(&self, kind: ModelKind) -> PathBuf {
        let configured = match kind {
            ModelKind::Dynamics => &self.models.dynamics,
            ModelKind::Denoiser => &self.models.denoiser,
            ModelKind::Bc => &self.models.bc,
            ModelKind::NoisyBc => &self.models.noisy_bc,
            ModelKind::Joint => &self.models.joint,
        };
        configured
            .clone()
            .unwrap_or_else(|| self.output_dir.join("models").join(format!("{}.json", kind.as_str())))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config always serializes")
    }
}

/// Parses `KEY=VALUE`, where `KEY` is a dotted path such as `train.sigma`
/// and `VALUE` is JSON (bare words are taken as strings).
fn apply_override(value: &mut Value, ov: &str) -> Result<(), CliError> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override '{ov}' is not KEY=VALUE")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::from(raw));
    set_path(value, key.trim(), parsed)
}

fn set_path(value: &mut Value, key: &str, new: Value) -> Result<(), CliError> {
    let mut cur = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("override key '{key}' does not name an object field")))?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), new);
            return Ok(());
        }
        cur = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(CliError::Usage(format!("empty override key in '{key}'")))
}
