//! Trained model types and their on-disk format.
//!
//! Every network operates in normalized coordinates; the models carry the
//! dataset statistics and expose raw-unit predictions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::env::EnvId;
use crate::error::{check_len, Error, Result};
use crate::net::NetParams;
use crate::train::TrainConfig;

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} produced a non-finite value")))
    }
}

/// Next-state predictor `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    pub net: NetParams,
    pub stats: NormStats,
}

impl DynamicsModel {
    pub fn new(net: NetParams, stats: NormStats) -> Result<Self> {
        let n = stats.state_dim();
        check_len("dynamics input", n, net.input_dim())?;
        check_len("dynamics output", n, net.output_dim())?;
        Ok(DynamicsModel { net, stats })
    }

    pub fn state_dim(&self) -> usize {
        self.stats.state_dim()
    }

    pub fn predict_normalized(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(x)
    }

    /// Batched prediction on row-major normalized states.
    pub fn predict_normalized_batch(&self, xs: &[f64], batch: usize) -> Result<Vec<f64>> {
        Ok(self.net.forward_batch(xs, batch)?.into_output())
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let out = self.predict_normalized(&self.stats.normalize_state(x)?)?;
        check_finite(&out, "dynamics model")?;
        self.stats.denormalize_state(&out)
    }
}

/// Joint state-denoising and action network `d(x_t, y) -> (x̂_{t+1}, â_t)`.
///
/// The input is the concatenation `[x_t, y]`; the output splits into the
/// refined next state (the map `g`) followed by the action.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoisingPolicy {
    pub net: NetParams,
    pub stats: NormStats,
}

impl DenoisingPolicy {
    pub fn new(net: NetParams, stats: NormStats) -> Result<Self> {
        let (n, m) = (stats.state_dim(), stats.action_dim());
        check_len("denoiser input", 2 * n, net.input_dim())?;
        check_len("denoiser output", n + m, net.output_dim())?;
        Ok(DenoisingPolicy { net, stats })
    }

    pub fn state_dim(&self) -> usize {
        self.stats.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.stats.action_dim()
    }

    /// `(x̂_{t+1}, â_t)` in normalized units.
    pub fn forward_normalized(&self, x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.state_dim();
        check_len("denoiser state", n, x.len())?;
        check_len("denoiser noisy next state", n, y.len())?;
        let input: Vec<f64> = x.iter().chain(y).copied().collect();
        let mut out = self.net.forward(&input)?;
        let action = out.split_off(n);
        Ok((out, action))
    }

    /// The state head `g(x, y)` in normalized units.
    pub fn state_head_normalized(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_normalized(x, y)?.0)
    }

    /// Batched state head on row-major normalized `[x, y]` rows.
    pub fn state_head_normalized_batch(&self, xy: &[f64], batch: usize) -> Result<Vec<f64>> {
        let n = self.state_dim();
        let out = self.net.forward_batch(xy, batch)?.into_output();
        let width = self.net.output_dim();
        Ok(out.chunks_exact(width).flat_map(|row| row[..n].to_vec()).collect())
    }

    /// Raw-unit `(x̂_{t+1}, â_t)` for a raw current state and raw `y`.
    pub fn refine(&self, x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (xn, yn) = (self.stats.normalize_state(x)?, self.stats.normalize_state(y)?);
        let (state, action) = self.forward_normalized(&xn, &yn)?;
        check_finite(&state, "denoising policy")?;
        check_finite(&action, "denoising policy")?;
        Ok((
            self.stats.denormalize_state(&state)?,
            self.stats.denormalize_action(&action)?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineVariant {
    /// Plain behavior cloning, state to action.
    Bc,
    /// Behavior cloning with Gaussian noise on the input states.
    NoisyBc,
    /// State to (next state, action) with no denoising input.
    Joint,
}

impl BaselineVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineVariant::Bc => "bc",
            BaselineVariant::NoisyBc => "noisy_bc",
            BaselineVariant::Joint => "joint",
        }
    }

    pub fn output_dim(self, state_dim: usize, action_dim: usize) -> usize {
        match self {
            BaselineVariant::Bc | BaselineVariant::NoisyBc => action_dim,
            BaselineVariant::Joint => state_dim + action_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselinePolicy {
    pub variant: BaselineVariant,
    pub net: NetParams,
    pub stats: NormStats,
    /// Input noise used in training (zero except for noisy BC).
    pub sigma: f64,
}

impl BaselinePolicy {
    pub fn new(variant: BaselineVariant, net: NetParams, stats: NormStats, sigma: f64) -> Result<Self> {
        let (n, m) = (stats.state_dim(), stats.action_dim());
        check_len("baseline input", n, net.input_dim())?;
        check_len("baseline output", variant.output_dim(n, m), net.output_dim())?;
        Ok(BaselinePolicy {
            variant,
            net,
            stats,
            sigma,
        })
    }

    /// Normalized action for a normalized state.
    pub fn act_normalized(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.net.forward(x)?;
        if self.variant == BaselineVariant::Joint {
            out = out.split_off(self.stats.state_dim());
        }
        Ok(out)
    }

    pub fn act(&self, x: &[f64]) -> Result<Vec<f64>> {
        let out = self.act_normalized(&self.stats.normalize_state(x)?)?;
        check_finite(&out, "baseline policy")?;
        self.stats.denormalize_action(&out)
    }

    /// The joint variant's next-state prediction, in raw units.
    pub fn predict_next(&self, x: &[f64]) -> Result<Option<Vec<f64>>> {
        if self.variant != BaselineVariant::Joint {
            return Ok(None);
        }
        let mut out = self.net.forward(&self.stats.normalize_state(x)?)?;
        out.truncate(self.stats.state_dim());
        check_finite(&out, "joint baseline")?;
        Ok(Some(self.stats.denormalize_state(&out)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dynamics,
    Denoiser,
    Bc,
    NoisyBc,
    Joint,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Dynamics,
        ModelKind::Denoiser,
        ModelKind::Bc,
        ModelKind::NoisyBc,
        ModelKind::Joint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Dynamics => "dynamics",
            ModelKind::Denoiser => "denoiser",
            ModelKind::Bc => "bc",
            ModelKind::NoisyBc => "noisy_bc",
            ModelKind::Joint => "joint",
        }
    }

    pub fn baseline_variant(self) -> Option<BaselineVariant> {
        match self {
            ModelKind::Bc => Some(BaselineVariant::Bc),
            ModelKind::NoisyBc => Some(BaselineVariant::NoisyBc),
            ModelKind::Joint => Some(BaselineVariant::Joint),
            ModelKind::Dynamics | ModelKind::Denoiser => None,
        }
    }
}

impl From<BaselineVariant> for ModelKind {
    fn from(v: BaselineVariant) -> Self {
        match v {
            BaselineVariant::Bc => ModelKind::Bc,
            BaselineVariant::NoisyBc => ModelKind::NoisyBc,
            BaselineVariant::Joint => ModelKind::Joint,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            let valid: Vec<_> = ModelKind::ALL.iter().map(|k| k.as_str()).collect();
            Error::InvalidArgument(format!("unknown model kind '{s}'; valid options: {}", valid.join(", ")))
        })
    }
}

/// Serialized model: the network JSON plus a header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub model_kind: ModelKind,
    pub env_id: EnvId,
    pub stats: NormStats,
    pub cfg: TrainConfig,
    #[serde(flatten)]
    pub net: NetParams,
}

impl ModelFile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.model_kind == kind {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "expected a {} model, found {}",
                kind.as_str(),
                self.model_kind.as_str()
            )))
        }
    }

    pub fn into_dynamics(self) -> Result<DynamicsModel> {
        self.expect_kind(ModelKind::Dynamics)?;
        DynamicsModel::new(self.net, self.stats)
    }

    pub fn into_denoiser(self) -> Result<DenoisingPolicy> {
        self.expect_kind(ModelKind::Denoiser)?;
        DenoisingPolicy::new(self.net, self.stats)
    }

    pub fn into_baseline(self) -> Result<BaselinePolicy> {
        let variant = self.model_kind.baseline_variant().ok_or_else(|| {
            Error::InvalidArgument(format!("{} model is not a baseline policy", self.model_kind.as_str()))
        })?;
        let sigma = if variant == BaselineVariant::NoisyBc {
            self.cfg.sigma
        } else {
            0.0
        };
        BaselinePolicy::new(variant, self.net, self.stats, sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_net, Activation};

    fn stats() -> NormStats {
        NormStats {
            state_mean: vec![1.0, -1.0],
            state_std: vec![2.0, 0.5],
            action_mean: vec![0.0, 0.5],
            action_std: vec![1.0, 2.0],
        }
    }

    #[test]
    fn model_file_round_trip_keeps_header_and_net() {
        let net = init_net(&[4, 8, 4], Activation::Tanh, 1).unwrap();
        let file = ModelFile {
            model_kind: ModelKind::Denoiser,
            env_id: EnvId::Sinusoid,
            stats: stats(),
            cfg: TrainConfig::default(),
            net,
        };
        let text = file.to_json().unwrap();
        let back: ModelFile = serde_json::from_str(&text).unwrap();
        assert_eq!(file, back);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["model_kind"], "denoiser");
        assert_eq!(v["layer_dims"], serde_json::json!([4, 8, 4]));
        assert!(back.clone().into_denoiser().is_ok());
        assert!(back.into_dynamics().is_err());
    }

    #[test]
    fn dims_are_validated() {
        let net = init_net(&[2, 3, 2], Activation::Tanh, 0).unwrap();
        assert!(DynamicsModel::new(net.clone(), stats()).is_ok());
        assert!(DenoisingPolicy::new(net.clone(), stats()).is_err());
        assert!(BaselinePolicy::new(BaselineVariant::Joint, net, stats(), 0.0).is_err());
    }

    #[test]
    fn joint_baseline_returns_action_tail() {
        let net = init_net(&[2, 5, 4], Activation::Tanh, 3).unwrap();
        let full = net.forward(&[0.2, 0.4]).unwrap();
        let policy = BaselinePolicy::new(BaselineVariant::Joint, net, stats(), 0.0).unwrap();
        assert_eq!(policy.act_normalized(&[0.2, 0.4]).unwrap(), full[2..].to_vec());
    }
}
